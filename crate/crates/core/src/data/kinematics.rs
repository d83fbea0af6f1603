//! A 21-joint articulated hand: wrist plus four joints per finger.
//!
//! Joint order is wrist, then thumb, index, middle, ring and pinky, each from
//! the base joint out to the tip. In the hand frame the wrist sits at the
//! origin, fingers extend along +y and the palm lies in the xy plane.

use crate::error::{Error, Result};

pub const JOINTS: usize = 21;
pub const FINGERS: usize = 5;
pub const FINGER_NAMES: [&str; FINGERS] = ["thumb", "index", "middle", "ring", "pinky"];

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

pub fn transpose(a: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [a[0][i], a[1][i], a[2][i]])
}

pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: &Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// `Rz(roll) · Rx(pitch) · Ry(yaw)`.
pub fn euler(yaw: f64, pitch: f64, roll: f64) -> Mat3 {
    mat_mul(&rot_z(roll), &mat_mul(&rot_x(pitch), &rot_y(yaw)))
}

/// Index of joint `k` (0 = base, 3 = tip) of finger `f`.
pub fn joint_index(finger: usize, k: usize) -> usize {
    1 + 4 * finger + k
}

/// Finger owning joint `j`, or `None` for the wrist.
pub fn finger_of(j: usize) -> Option<usize> {
    (j > 0).then(|| (j - 1) / 4)
}

/// Static geometry of one hand.
#[derive(Clone, Debug, PartialEq)]
pub struct HandShape {
    /// Base joint position of each finger relative to the wrist.
    pub bases: [Vec3; FINGERS],
    /// In-palm angle of each finger's rest direction, measured from +y
    /// towards +x.
    pub directions: [f64; FINGERS],
    /// Lengths of the three bones of each finger, base outwards.
    pub segments: [[f64; 3]; FINGERS],
}

impl Default for HandShape {
    fn default() -> Self {
        let polar = |len: f64, angle: f64| [len * angle.sin(), len * angle.cos(), 0.0];
        Self {
            bases: [
                polar(0.45, 0.95),
                polar(0.96, 0.22),
                [0.0, 1.0, 0.0],
                polar(0.93, -0.2),
                polar(0.85, -0.42),
            ],
            directions: [1.0, 0.12, 0.0, -0.1, -0.24],
            segments: [
                [0.45, 0.35, 0.3],
                [0.42, 0.26, 0.2],
                [0.46, 0.29, 0.21],
                [0.43, 0.27, 0.2],
                [0.34, 0.21, 0.18],
            ],
        }
    }
}

impl HandShape {
    /// Length of the wrist to middle-finger base bone, the unit of the
    /// normalized 3D targets.
    pub fn reference_bone(&self) -> f64 {
        norm(&self.bases[2])
    }

    /// Longest finger chain.
    pub fn max_finger_length(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.iter().sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Upper bound on the distance of any joint from the wrist.
    pub fn reach(&self) -> f64 {
        (0..FINGERS)
            .map(|f| norm(&self.bases[f]) + self.segments[f].iter().sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Joint positions with every angle at zero.
    pub fn template(&self) -> [Vec3; JOINTS] {
        let mut out = [[0.0; 3]; JOINTS];
        for f in 0..FINGERS {
            let d = [self.directions[f].sin(), self.directions[f].cos(), 0.0];
            let mut p = self.bases[f];
            out[joint_index(f, 0)] = p;
            for k in 0..3 {
                p = add(&p, &scale(&d, self.segments[f][k]));
                out[joint_index(f, k + 1)] = p;
            }
        }
        out
    }
}

/// Articulation of one finger, in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FingerAngles {
    /// Flexion at the base joint, positive curling towards +z.
    pub base_flex: f64,
    /// Sideways spread at the base joint.
    pub base_abd: f64,
    pub mid_flex: f64,
    pub tip_flex: f64,
}

/// Inclusive anatomical limits of [`FingerAngles`].
pub const BASE_FLEX_LIMITS: (f64, f64) = (-0.3, 1.6);
pub const BASE_ABD_LIMITS: (f64, f64) = (-0.35, 0.35);
pub const MID_FLEX_LIMITS: (f64, f64) = (0.0, 1.9);
pub const TIP_FLEX_LIMITS: (f64, f64) = (0.0, 1.4);

impl FingerAngles {
    pub fn as_array(&self) -> [f64; 4] {
        [self.base_flex, self.base_abd, self.mid_flex, self.tip_flex]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            base_flex: a[0],
            base_abd: a[1],
            mid_flex: a[2],
            tip_flex: a[3],
        }
    }

    pub fn limits() -> [(f64, f64); 4] {
        [
            BASE_FLEX_LIMITS,
            BASE_ABD_LIMITS,
            MID_FLEX_LIMITS,
            TIP_FLEX_LIMITS,
        ]
    }

    pub fn clamped(self) -> Self {
        let a = self.as_array();
        let l = Self::limits();
        Self::from_array([0, 1, 2, 3].map(|i| a[i].clamp(l[i].0, l[i].1)))
    }
}

/// A posed hand in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicHand {
    pub shape: HandShape,
    pub angles: [FingerAngles; FINGERS],
    /// Hand-to-world rotation about the wrist.
    pub rotation: Mat3,
    /// World position of the wrist.
    pub translation: Vec3,
}

impl KinematicHand {
    pub fn rest(shape: HandShape) -> Self {
        Self {
            shape,
            angles: [FingerAngles::default(); FINGERS],
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn check_limits(&self) -> Result<()> {
        const PARTS: [&str; 4] = ["base flexion", "base abduction", "middle flexion", "tip flexion"];
        for (f, a) in self.angles.iter().enumerate() {
            for ((v, (lo, hi)), part) in a.as_array().iter().zip(FingerAngles::limits()).zip(PARTS) {
                if !(lo..=hi).contains(v) {
                    return Err(Error::Domain(format!(
                        "{} {part} {v} outside [{lo}, {hi}]",
                        FINGER_NAMES[f]
                    )));
                }
            }
        }
        Ok(())
    }

    /// World positions of all 21 joints.
    pub fn forward_kinematics(&self) -> Result<[Vec3; JOINTS]> {
        self.check_limits()?;
        let s = &self.shape;
        let mut local = [[0.0; 3]; JOINTS];
        for f in 0..FINGERS {
            let a = &self.angles[f];
            let splay = rot_z(-s.directions[f]);
            let mut r = mat_mul(
                &splay,
                &mat_mul(&rot_z(-a.base_abd), &rot_x(a.base_flex)),
            );
            let mut p = s.bases[f];
            local[joint_index(f, 0)] = p;
            let bends = [0.0, a.mid_flex, a.tip_flex];
            for k in 0..3 {
                r = mat_mul(&r, &rot_x(bends[k]));
                p = add(&p, &mat_vec(&r, &[0.0, s.segments[f][k], 0.0]));
                local[joint_index(f, k + 1)] = p;
            }
        }
        Ok(local.map(|p| add(&mat_vec(&self.rotation, &p), &self.translation)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        norm(&sub(a, b)) < tol
    }

    #[test]
    fn zero_angles_give_template() {
        let hand = KinematicHand::rest(HandShape::default());
        let joints = hand.forward_kinematics().unwrap();
        let template = hand.shape.template();
        for (a, b) in joints.iter().zip(&template) {
            assert!(close(a, b, 1e-15), "{a:?} vs {b:?}");
        }
        assert_eq!(joints[0], [0.0; 3]);
        assert!((hand.shape.reference_bone() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn translation_shifts_every_joint() {
        let mut hand = KinematicHand::rest(HandShape::default());
        hand.angles[1].mid_flex = 0.7;
        hand.rotation = euler(0.3, -0.2, 0.9);
        let before = hand.forward_kinematics().unwrap();
        let t = [0.5, -2.0, 3.25];
        hand.translation = t;
        let after = hand.forward_kinematics().unwrap();
        for (a, b) in after.iter().zip(&before) {
            assert!(close(a, &add(b, &t), 1e-12));
        }
    }

    #[test]
    fn right_angle_base_flexion() {
        // Middle finger, straight chain along +y from base (0, 1, 0). A 90°
        // base flexion turns the whole chain to +z, so by hand the joints
        // are (0, 1, l0), (0, 1, l0 + l1), (0, 1, l0 + l1 + l2).
        let mut hand = KinematicHand::rest(HandShape::default());
        hand.angles[2].base_flex = FRAC_PI_2;
        let j = hand.forward_kinematics().unwrap();
        let [l0, l1, l2] = hand.shape.segments[2];
        assert!(close(&j[joint_index(2, 0)], &[0.0, 1.0, 0.0], 1e-15));
        assert!(close(&j[joint_index(2, 1)], &[0.0, 1.0, l0], 1e-12));
        assert!(close(&j[joint_index(2, 2)], &[0.0, 1.0, l0 + l1], 1e-12));
        assert!(close(&j[joint_index(2, 3)], &[0.0, 1.0, l0 + l1 + l2], 1e-12));
        // Other fingers stay put.
        let rest = hand.shape.template();
        assert!(close(&j[joint_index(1, 3)], &rest[joint_index(1, 3)], 1e-15));
    }

    #[test]
    fn two_bone_chain_by_hand() {
        // Base flexion a then middle flexion b: first bone at angle a from +y
        // in the yz plane, second at a + b.
        let mut hand = KinematicHand::rest(HandShape::default());
        let (a, b) = (0.4, 0.9);
        hand.angles[2].base_flex = a;
        hand.angles[2].mid_flex = b;
        let j = hand.forward_kinematics().unwrap();
        let [l0, l1, _] = hand.shape.segments[2];
        let p1 = [0.0, 1.0 + l0 * a.cos(), l0 * a.sin()];
        let p2 = [0.0, p1[1] + l1 * (a + b).cos(), p1[2] + l1 * (a + b).sin()];
        assert!(close(&j[joint_index(2, 1)], &p1, 1e-12));
        assert!(close(&j[joint_index(2, 2)], &p2, 1e-12));
    }

    #[test]
    fn out_of_limit_angle_is_domain_error() {
        let mut hand = KinematicHand::rest(HandShape::default());
        hand.angles[4].tip_flex = 2.0;
        let err = hand.forward_kinematics().unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains("pinky")), "{err}");
    }

    #[test]
    fn bone_lengths_are_preserved() {
        let mut hand = KinematicHand::rest(HandShape::default());
        hand.angles = [FingerAngles::from_array([1.1, -0.3, 1.5, 0.8]); FINGERS];
        hand.rotation = euler(1.0, 0.5, -0.4);
        let j = hand.forward_kinematics().unwrap();
        for f in 0..FINGERS {
            for k in 0..3 {
                let d = norm(&sub(&j[joint_index(f, k + 1)], &j[joint_index(f, k)]));
                assert!((d - hand.shape.segments[f][k]).abs() < 1e-12);
            }
        }
    }
}
