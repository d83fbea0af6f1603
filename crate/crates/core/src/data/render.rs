//! Stick-and-blob rasterizer for projected skeletons.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kinematics::{joint_index, FINGERS, JOINTS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FINGER_COLORS: [[f32; 3]; FINGERS] = [
    [1.0, 0.25, 0.2],
    [0.2, 1.0, 0.3],
    [0.25, 0.45, 1.0],
    [1.0, 0.9, 0.2],
    [0.9, 0.3, 1.0],
];
const WRIST_COLOR: [f32; 3] = [0.95, 0.95, 0.95];

#[derive(Clone, Debug, PartialEq)]
pub struct RenderStyle {
    /// Background colors at the two ends of the gradient.
    pub background: [[f32; 3]; 2],
    /// Gradient direction in radians.
    pub gradient_angle: f64,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f32,
    pub noise_seed: u64,
    /// Bit `f` set hides finger `f` entirely.
    pub hidden: u8,
    /// Bone thickness in pixels.
    pub bone_width: f64,
    /// Standard deviation of the joint blobs in pixels.
    pub blob_sigma: f64,
}

impl RenderStyle {
    /// Plain dark background, sizes scaled to the image width.
    pub fn for_size(img_w: usize) -> Self {
        let s = img_w as f64 / 32.0;
        Self {
            background: [[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]],
            gradient_angle: 0.0,
            noise: 0.0,
            noise_seed: 0,
            hidden: 0,
            bone_width: 1.1 * s,
            blob_sigma: 0.7 * s,
        }
    }

    /// Random background colors and gradient.
    pub fn randomized(img_w: usize, rng: &mut impl Rng) -> Self {
        let mut style = Self::for_size(img_w);
        for c in style.background.iter_mut().flat_map(|c| c.iter_mut()) {
            *c = rng.random_range(0.0..0.3);
        }
        style.gradient_angle = rng.random_range(0.0..std::f64::consts::TAU);
        style.noise = 0.03;
        style.noise_seed = rng.random();
        style
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

struct Layer {
    color: [f32; 3],
    segments: Vec<([f64; 2], [f64; 2])>,
    blobs: Vec<[f64; 2]>,
}

impl Layer {
    fn coverage(&self, p: [f64; 2], style: &RenderStyle) -> f64 {
        let half = style.bone_width / 2.0;
        let mut a: f64 = 0.0;
        for &(s, e) in &self.segments {
            a = a.max((half + 0.5 - segment_distance(p, s, e)).clamp(0.0, 1.0));
        }
        let cutoff = 3.0 * style.blob_sigma;
        for c in &self.blobs {
            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            if d2 < cutoff * cutoff {
                a = a.max((-d2 / (2.0 * style.blob_sigma * style.blob_sigma)).exp());
            }
        }
        a
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` outside of which coverage is 0.
    fn bounds(&self, style: &RenderStyle, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let pad = (style.bone_width / 2.0 + 0.5).max(3.0 * style.blob_sigma) + 1.0;
        let pts = self
            .segments
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .chain(self.blobs.iter().copied());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in pts {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let lo = |v: f64, n: usize| ((v - pad).floor().max(0.0) as usize).min(n);
        let hi = |v: f64, n: usize| ((v + pad).ceil().max(0.0) as usize).min(n);
        (lo(x0, w), hi(x1, w), lo(y0, h), hi(y1, h))
    }
}

/// Renders `joints` (pixel `(x, y)` with pixel centers at half-integers)
/// into a `[3, img_h, img_w]` image with values in `[0, 1]`.
pub fn render(joints: &[[f64; 2]], img_h: usize, img_w: usize, style: &RenderStyle) -> Result<Tensor<f32>> {
    if joints.len() != JOINTS {
        return Err(Error::dim(format!("{} joints, expected {JOINTS}", joints.len())));
    }
    if img_h < 16 || img_w < 16 {
        return Err(Error::contract(format!(
            "render needs images of at least 16×16, got {img_h}×{img_w}"
        )));
    }
    if joints.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite joint position".into()));
    }
    let plane = img_h * img_w;
    let mut px = vec![0f32; 3 * plane];
    let (s, c) = style.gradient_angle.sin_cos();
    for y in 0..img_h {
        for x in 0..img_w {
            let u = (x as f64 + 0.5) / img_w as f64 - 0.5;
            let v = (y as f64 + 0.5) / img_h as f64 - 0.5;
            let t = ((u * c + v * s) / std::f64::consts::SQRT_2 + 0.5) as f32;
            for ch in 0..3 {
                let [a, b] = [style.background[0][ch], style.background[1][ch]];
                px[ch * plane + y * img_w + x] = a + (b - a) * t;
            }
        }
    }

    let mut layers = vec![Layer {
        color: WRIST_COLOR,
        segments: Vec::new(),
        blobs: vec![joints[0]],
    }];
    for f in (0..FINGERS).rev() {
        if style.hidden & (1 << f) != 0 {
            continue;
        }
        let chain: Vec<[f64; 2]> = std::iter::once(joints[0])
            .chain((0..4).map(|k| joints[joint_index(f, k)]))
            .collect();
        layers.push(Layer {
            color: FINGER_COLORS[f],
            segments: chain.windows(2).map(|w| (w[0], w[1])).collect(),
            blobs: chain[1..].to_vec(),
        });
    }
    for layer in &layers {
        let (x0, x1, y0, y1) = layer.bounds(style, img_w, img_h);
        for y in y0..y1 {
            for x in x0..x1 {
                let a = layer.coverage([x as f64 + 0.5, y as f64 + 0.5], style) as f32;
                if a > 0.0 {
                    for ch in 0..3 {
                        let p = &mut px[ch * plane + y * img_w + x];
                        *p = *p * (1.0 - a) + layer.color[ch] * a;
                    }
                }
            }
        }
    }

    if style.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(style.noise_seed);
        for p in px.iter_mut() {
            *p += rng.random_range(-style.noise..style.noise);
        }
    }
    px.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Tensor::new(vec![3, img_h, img_w], px)
}
