//! Seeded generation of temporal and multi-view hand sequences.
//!
//! Subjects fix the hand shape, activities fix the mean pose and the pace of
//! motion, and every sequence draws from its own sub-generator so the result
//! does not depend on generation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::camera::Camera;
use super::kinematics::{
    add, euler, joint_index, norm, scale, sub, FingerAngles, HandShape, KinematicHand, Vec3,
    FINGERS, JOINTS,
};
use super::render::{render, RenderStyle};
use super::{Dataset, DatasetHeader, FrameGeometry, HandSequenceSample};
use crate::config::SequenceMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub mode: SequenceMode,
    pub subjects: u32,
    pub activities: u32,
    /// Sequences per (subject, activity) pair.
    pub sequences: u32,
    pub seq_len: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub seed: u64,
    /// Largest change of any joint or global rotation angle between
    /// consecutive temporal frames, in radians.
    pub max_angle_step: f64,
    /// Largest wrist displacement between consecutive temporal frames.
    pub max_translation_step: f64,
    /// Angle between neighbouring cameras of the multi-view ring.
    pub camera_spacing: f64,
    /// Camera distance from the hand.
    pub distance: f64,
    /// Probability that a sequence has one finger left out of a random
    /// proper subset of its frames.
    pub occlusion: f64,
}

impl GeneratorSpec {
    pub fn new(mode: SequenceMode, subjects: u32, activities: u32, sequences: u32, seed: u64) -> Self {
        Self {
            mode,
            subjects,
            activities,
            sequences,
            seq_len: mode.default_len(),
            img_h: 32,
            img_w: 32,
            seed,
            max_angle_step: 0.12,
            max_translation_step: 0.03,
            camera_spacing: 30f64.to_radians(),
            distance: 6.0,
            occlusion: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.activities == 0 || self.sequences == 0 || self.seq_len == 0 {
            return Err(Error::Config("dataset counts must be at least 1".into()));
        }
        if self.img_h < 16 || self.img_w < 16 {
            return Err(Error::Config("frames must be at least 16×16".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return Err(Error::Config("occlusion must be a probability".into()));
        }
        if !(self.distance > 3.0) {
            return Err(Error::Config(
                "camera distance must keep the hand in front of the camera".into(),
            ));
        }
        if !(self.max_angle_step >= 0.0 && self.max_translation_step >= 0.0) {
            return Err(Error::Config("motion budgets must be non-negative".into()));
        }
        Ok(())
    }

    /// Upper bound on how far any normalized 3D joint moves between
    /// consecutive temporal frames of a hand with `shape`.
    ///
    /// Three global angles move a joint at distance `r` by at most `3δr`;
    /// four articulation angles along a finger move it by at most `4δℓ`
    /// where `ℓ` is the finger length.
    pub fn displacement_bound(&self, shape: &HandShape) -> f64 {
        self.max_angle_step * (3.0 * shape.reach() + 4.0 * shape.max_finger_length())
            / shape.reference_bone()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(tag, ids...)` item of the dataset.
fn sub_rng(seed: u64, tag: u64, ids: &[u32]) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ splitmix(tag));
    for &i in ids {
        h = splitmix(h ^ u64::from(i));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Hand shape of a subject.
pub fn subject_shape(seed: u64, subject: u32) -> HandShape {
    let mut rng = sub_rng(seed, 1, &[subject]);
    let mut shape = HandShape::default();
    let size = rng.random_range(0.92..1.08);
    for f in 0..FINGERS {
        let b = shape.bases[f];
        let len = norm(&b) * size * rng.random_range(0.97..1.03);
        let angle = b[0].atan2(b[1]) + rng.random_range(-0.04..0.04);
        shape.bases[f] = [len * angle.sin(), len * angle.cos(), 0.0];
        shape.directions[f] += rng.random_range(-0.04..0.04);
        for s in shape.segments[f].iter_mut() {
            *s *= size * rng.random_range(0.95..1.05);
        }
    }
    shape
}

/// Typical pose and pace of an activity.
#[derive(Clone, Debug)]
struct Activity {
    angles: [[f64; 4]; FINGERS],
    amplitude: [[f64; 4]; FINGERS],
    orientation: [f64; 3],
    pace: f64,
}

fn activity(seed: u64, id: u32) -> Activity {
    let mut rng = sub_rng(seed, 2, &[id]);
    let mut angles = [[0.0; 4]; FINGERS];
    let mut amplitude = [[0.0; 4]; FINGERS];
    for f in 0..FINGERS {
        angles[f] = [
            rng.random_range(-0.1..1.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.0..1.4),
            rng.random_range(0.0..1.0),
        ];
        amplitude[f] = [0, 1, 2, 3].map(|_| rng.random_range(0.1..0.4));
    }
    Activity {
        angles,
        amplitude,
        orientation: [
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
        ],
        pace: rng.random_range(0.5..1.0),
    }
}

/// A smooth scalar trajectory `a₀ + v·t + A·(sin(ωt + φ) − sin φ)` whose
/// per-step change never exceeds `|v| + Aω`.
#[derive(Clone, Copy, Debug)]
struct Track {
    start: f64,
    velocity: f64,
    amplitude: f64,
    omega: f64,
    phase: f64,
}

impl Track {
    fn new(start: f64, amplitude: f64, budget: f64, rng: &mut impl Rng) -> Self {
        let half = budget / 2.0;
        Self {
            start,
            velocity: rng.random_range(-1.0..=1.0) * half,
            amplitude,
            omega: if amplitude > 0.0 { half / amplitude } else { 0.0 },
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.start
            + self.velocity * t
            + self.amplitude * ((self.omega * t + self.phase).sin() - self.phase.sin())
    }
}

struct Motion {
    fingers: [[Track; 4]; FINGERS],
    orientation: [Track; 3],
    position: [Track; 3],
}

impl Motion {
    fn hand(&self, shape: &HandShape, t: f64) -> KinematicHand {
        let mut hand = KinematicHand::rest(shape.clone());
        for f in 0..FINGERS {
            hand.angles[f] = FingerAngles::from_array(self.fingers[f].map(|k| k.at(t))).clamped();
        }
        let [yaw, pitch, roll] = self.orientation.map(|k| k.at(t));
        hand.rotation = euler(yaw, pitch, roll);
        hand.translation = self.position.map(|k| k.at(t));
        hand
    }
}

const WRIST_HOME: Vec3 = [0.0, -0.9, 0.0];
/// Roughly the middle of the hand seen from the wrist.
const HAND_CENTER: Vec3 = [0.0, 0.9, 0.0];

fn motion(spec: &GeneratorSpec, act: &Activity, rng: &mut ChaCha8Rng) -> Motion {
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let step = spec.max_angle_step * act.pace;
    let fingers = std::array::from_fn(|f| {
        std::array::from_fn(|k| {
            let (lo, hi) = FingerAngles::limits()[k];
            let start = (act.angles[f][k] + 0.25 * jitter.sample(rng)).clamp(lo, hi);
            Track::new(start, act.amplitude[f][k], step, rng)
        })
    });
    let orientation = std::array::from_fn(|k| {
        let start = act.orientation[k] + 0.3 * jitter.sample(rng);
        Track::new(start, 0.3, step, rng)
    });
    let position = std::array::from_fn(|k| {
        let start = WRIST_HOME[k] + 0.1 * jitter.sample(rng);
        Track::new(start, 0.0, spec.max_translation_step / 3f64.sqrt(), rng)
    });
    Motion {
        fingers,
        orientation,
        position,
    }
}

fn intrinsics(spec: &GeneratorSpec) -> Camera {
    let (w, h) = (spec.img_w as f64, spec.img_h as f64);
    Camera::new(2.0 * w, 2.0 * w, w / 2.0, h / 2.0)
}

/// Camera `i` of the ring around the y axis through `target`.
pub fn ring_camera(spec: &GeneratorSpec, i: usize, n: usize, target: Vec3) -> Result<Camera> {
    let azimuth = (i as f64 - (n as f64 - 1.0) / 2.0) * spec.camera_spacing;
    let eye = add(
        &target,
        &scale(&[azimuth.sin(), 0.0, -azimuth.cos()], spec.distance),
    );
    intrinsics(spec).looking_at(eye, target, [0.0, 1.0, 0.0])
}

fn observe(world: &[Vec3; JOINTS], camera: Camera) -> Result<(FrameGeometry, Vec<f64>, Vec<f64>)> {
    let cam: Vec<Vec3> = world.iter().map(|p| camera.to_camera(p)).collect();
    let root = cam[0];
    let bone = norm(&sub(&cam[joint_index(2, 0)], &root));
    let mut gt2d = Vec::with_capacity(JOINTS * 2);
    let mut gt3d = Vec::with_capacity(JOINTS * 3);
    for p in &cam {
        gt2d.extend(camera.project_camera(p)?);
        gt3d.extend(scale(&sub(p, &root), 1.0 / bone));
    }
    Ok((FrameGeometry { camera, root, bone }, gt2d, gt3d))
}

/// Per-frame hidden-finger masks: with probability `spec.occlusion`, one
/// finger vanishes from a random non-empty proper subset of the frames.
fn occlusion_masks(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = spec.seq_len;
    let mut hidden = vec![0u8; n];
    if n < 2 || spec.occlusion == 0.0 || !rng.random_bool(spec.occlusion) {
        return hidden;
    }
    let finger = rng.random_range(0..FINGERS);
    let count = rng.random_range(1..n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        order.swap(i, j);
        hidden[order[i]] = 1 << finger;
    }
    hidden
}

/// Generates one sequence.
pub fn generate_sequence(spec: &GeneratorSpec, subject: u32, act_id: u32, seq: u32) -> Result<HandSequenceSample> {
    let shape = subject_shape(spec.seed, subject);
    let act = activity(spec.seed, act_id);
    let mut rng = sub_rng(spec.seed, 3, &[subject, act_id, seq]);
    let motion = motion(spec, &act, &mut rng);
    let style = RenderStyle::randomized(spec.img_w, &mut rng);
    let hidden = occlusion_masks(spec, &mut rng);

    let n = spec.seq_len;
    let target = add(&WRIST_HOME, &HAND_CENTER);
    let mut cameras = Vec::with_capacity(n);
    let mut geometry = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n * 3 * spec.img_h * spec.img_w);
    let mut gt2d = Vec::with_capacity(n * JOINTS * 2);
    let mut gt3d = Vec::with_capacity(n * JOINTS * 3);
    for i in 0..n {
        let (t, cam_id) = match spec.mode {
            SequenceMode::Temporal => (i as f64, 0),
            SequenceMode::Angular => (0.0, i),
        };
        let cam_count = if spec.mode == SequenceMode::Angular { n } else { 1 };
        let camera = ring_camera(spec, cam_id, cam_count, target)?;
        let world = motion.hand(&shape, t).forward_kinematics()?;
        let (geo, p2, p3) = observe(&world, camera)?;
        let pixels: Vec<[f64; 2]> = p2.chunks(2).map(|c| [c[0], c[1]]).collect();
        let frame_style = RenderStyle {
            noise_seed: style.noise_seed.wrapping_add(i as u64),
            hidden: hidden[i],
            ..style.clone()
        };
        frames.extend_from_slice(render(&pixels, spec.img_h, spec.img_w, &frame_style)?.data());
        cameras.push(cam_id as u32);
        geometry.push(geo);
        gt2d.extend(p2);
        gt3d.extend(p3);
    }
    Ok(HandSequenceSample {
        mode: spec.mode,
        subject,
        activity: act_id,
        sequence: seq,
        cameras,
        hidden,
        geometry,
        frames: Tensor::new(vec![n, 3, spec.img_h, spec.img_w], frames)?,
        gt2d: Tensor::new(vec![n, JOINTS, 2], gt2d)?,
        gt3d: Tensor::new(vec![n, JOINTS, 3], gt3d)?,
    })
}

/// Every (subject, activity, sequence) combination, subjects outermost.
/// Ids start at 1.
pub fn generate_dataset(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::new();
    for s in 1..=spec.subjects {
        for a in 1..=spec.activities {
            for q in 1..=spec.sequences {
                samples.push(generate_sequence(spec, s, a, q)?);
            }
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            mode: spec.mode,
            seq_len: spec.seq_len,
            img_h: spec.img_h,
            img_w: spec.img_w,
            channels: 3,
            joints: JOINTS,
            subjects: spec.subjects,
            activities: spec.activities,
            sequences: spec.sequences,
            seed: spec.seed,
        },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_multiply() {
        let spec = GeneratorSpec::new(SequenceMode::Temporal, 2, 2, 4, 1);
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 16);
        ds.validate().unwrap();
        assert_eq!(ds.samples[0].subject, 1);
        assert_eq!(ds.samples[15].subject, 2);
    }

    #[test]
    fn reprojection_is_exact() {
        for mode in [SequenceMode::Temporal, SequenceMode::Angular] {
            let ds = generate_dataset(&GeneratorSpec::new(mode, 2, 2, 2, 9)).unwrap();
            for s in &ds.samples {
                assert!(s.reprojection_error().unwrap() < 1e-5);
            }
        }
    }

    #[test]
    fn temporal_motion_is_bounded() {
        let spec = GeneratorSpec {
            seq_len: 8,
            ..GeneratorSpec::new(SequenceMode::Temporal, 3, 3, 3, 4)
        };
        let ds = generate_dataset(&spec).unwrap();
        for s in &ds.samples {
            let bound = spec.displacement_bound(&subject_shape(spec.seed, s.subject));
            for i in 1..s.len() {
                for j in 0..JOINTS {
                    let d = norm(&sub(&s.joint3d(i, j), &s.joint3d(i - 1, j)));
                    assert!(d < bound, "joint {j} moved {d} ≥ {bound}");
                }
            }
        }
    }

    #[test]
    fn angular_views_share_world_pose() {
        let ds = generate_dataset(&GeneratorSpec::new(SequenceMode::Angular, 2, 1, 3, 2)).unwrap();
        for s in &ds.samples {
            assert_eq!(s.cameras, vec![0, 1, 2]);
            let first = s.world_joints(0);
            for v in 1..s.len() {
                for (a, b) in s.world_joints(v).iter().zip(&first) {
                    assert!(norm(&sub(a, b)) < 1e-9);
                }
            }
            assert!(s.gt2d.data()[..42] != s.gt2d.data()[42..84]);
        }
    }

    #[test]
    fn deterministic_and_order_independent() {
        let spec = GeneratorSpec::new(SequenceMode::Temporal, 2, 2, 2, 11);
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let alone = generate_sequence(&spec, 2, 1, 2).unwrap();
        assert_eq!(alone, a.samples[5]);
    }

    #[test]
    fn occlusion_hides_one_finger_in_some_frames() {
        let spec = GeneratorSpec {
            occlusion: 1.0,
            ..GeneratorSpec::new(SequenceMode::Temporal, 2, 2, 3, 5)
        };
        let ds = generate_dataset(&spec).unwrap();
        for s in &ds.samples {
            let masks: Vec<u8> = s.hidden.iter().copied().filter(|&m| m != 0).collect();
            assert!(!masks.is_empty() && masks.len() < s.len());
            assert!(masks.iter().all(|&m| m == masks[0] && m.count_ones() == 1));
        }
    }
}
