//! Synthetic hand sequences: articulated hands, pinhole cameras, a simple
//! rasterizer, the dataset generator and its binary file format.

pub mod camera;
pub mod format;
pub mod generate;
pub mod kinematics;
pub mod render;
pub mod split;

pub use camera::Camera;
pub use format::{read_dataset, write_dataset};
pub use generate::{generate_dataset, GeneratorSpec};
pub use kinematics::{FingerAngles, HandShape, KinematicHand, JOINTS};
pub use render::{render, RenderStyle};
pub use split::{Split, SplitBy};

use crate::config::SequenceMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kinematics::{add, norm, scale, Vec3};

/// Where one frame's ground truth came from: the camera, the wrist in camera
/// coordinates and the reference bone length used for normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameGeometry {
    pub camera: Camera,
    pub root: Vec3,
    pub bone: f64,
}

impl FrameGeometry {
    /// Camera coordinates of a normalized root-relative joint.
    pub fn unnormalize(&self, p: &Vec3) -> Vec3 {
        add(&self.root, &scale(p, self.bone))
    }
}

/// One sequence of frames with 2D (pixel) and 3D (root-relative,
/// bone-normalized, camera-frame) ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct HandSequenceSample {
    pub mode: SequenceMode,
    pub subject: u32,
    pub activity: u32,
    pub sequence: u32,
    /// Camera id of every frame.
    pub cameras: Vec<u32>,
    /// Per-frame bitmask of fingers left out of the rendering.
    pub hidden: Vec<u8>,
    pub geometry: Vec<FrameGeometry>,
    /// `[N, 3, img_h, img_w]`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// `[N, 21, 2]` pixel coordinates.
    pub gt2d: Tensor<f64>,
    /// `[N, 21, 3]`.
    pub gt3d: Tensor<f64>,
}

impl HandSequenceSample {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn joint3d(&self, frame: usize, j: usize) -> Vec3 {
        let d = &self.gt3d.data()[(frame * JOINTS + j) * 3..][..3];
        [d[0], d[1], d[2]]
    }

    pub fn joint2d(&self, frame: usize, j: usize) -> [f64; 2] {
        let d = &self.gt2d.data()[(frame * JOINTS + j) * 2..][..2];
        [d[0], d[1]]
    }

    /// World coordinates of every joint of `frame`.
    pub fn world_joints(&self, frame: usize) -> Vec<Vec3> {
        let g = &self.geometry[frame];
        (0..JOINTS)
            .map(|j| g.camera.to_world(&g.unnormalize(&self.joint3d(frame, j))))
            .collect()
    }

    /// Largest pixel distance between `gt2d` and the projection of the
    /// un-normalized `gt3d`.
    pub fn reprojection_error(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (i, g) in self.geometry.iter().enumerate() {
            for j in 0..JOINTS {
                let p = g.camera.project_camera(&g.unnormalize(&self.joint3d(i, j)))?;
                let q = self.joint2d(i, j);
                worst = worst.max(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
            }
        }
        Ok(worst)
    }

    /// Checks the structural invariants of the sample.
    pub fn validate(&self, header: &DatasetHeader) -> Result<()> {
        let n = header.seq_len;
        let (h, w) = (header.img_h, header.img_w);
        if self.cameras.len() != n || self.hidden.len() != n || self.geometry.len() != n {
            return Err(Error::Format(format!(
                "sample metadata does not describe {n} frames"
            )));
        }
        if self.frames.shape() != [n, header.channels, h, w]
            || self.gt2d.shape() != [n, JOINTS, 2]
            || self.gt3d.shape() != [n, JOINTS, 3]
        {
            return Err(Error::dim(format!(
                "sample tensors {:?}, {:?}, {:?} do not match the header",
                self.frames.shape(),
                self.gt2d.shape(),
                self.gt3d.shape()
            )));
        }
        for i in 0..n {
            if norm(&self.joint3d(i, 0)) != 0.0 {
                return Err(Error::Format(format!("frame {i}: wrist is not the origin")));
            }
            let bone = norm(&self.joint3d(i, kinematics::joint_index(2, 0)));
            if (bone - 1.0).abs() > 1e-9 {
                return Err(Error::Format(format!(
                    "frame {i}: reference bone has length {bone}"
                )));
            }
        }
        Ok(())
    }
}

/// Global description of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub mode: SequenceMode,
    pub seq_len: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub channels: usize,
    pub joints: usize,
    pub subjects: u32,
    pub activities: u32,
    /// Sequences per (subject, activity) pair.
    pub sequences: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<HandSequenceSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A dataset holding only the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).cloned().ok_or_else(|| {
                    Error::contract(format!("sample index {i} out of range {}", self.len()))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            header: self.header.clone(),
            samples,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.samples.iter().try_for_each(|s| s.validate(&self.header))
    }
}
