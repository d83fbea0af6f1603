//! Endpoint error, PCK curves and their normalized area.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Euclidean distance of every joint, in frame-major order.
///
/// Both tensors must share a shape whose last axis holds the coordinates.
pub fn joint_errors<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(format!(
            "prediction shape {:?} differs from ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let d = *pred
        .shape()
        .last()
        .ok_or_else(|| Error::dim("poses need a coordinate axis"))?;
    if d == 0 || pred.numel() == 0 {
        return Err(Error::dim(format!("empty pose tensor {:?}", pred.shape())));
    }
    Ok(pred
        .data()
        .chunks(d)
        .zip(gt.data().chunks(d))
        .map(|(p, g)| {
            p.iter()
                .zip(g)
                .map(|(a, b)| (a.f64() - b.f64()).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Mean endpoint error over all joints of all frames.
pub fn epe<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// What one PCK count refers to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PckPooling {
    /// Each joint is counted on its own.
    #[default]
    PerJoint,
    /// A frame counts as correct when its mean joint error is below the
    /// threshold.
    PerFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

/// `n` evenly spaced thresholds from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// The 20–50 range sampled at 100 thresholds.
pub fn default_thresholds() -> Vec<f64> {
    linspace(20.0, 50.0, 100)
}

fn check_thresholds(t: &[f64]) -> Result<()> {
    if t.is_empty() {
        return Err(Error::contract("PCK needs at least one threshold"));
    }
    if t.iter().any(|x| !x.is_finite()) || t.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::contract("PCK thresholds must be finite and ascending"));
    }
    Ok(())
}

/// Fraction of `errors` strictly below each threshold.
pub fn pck_from_errors(errors: &[f64], thresholds: &[f64]) -> Result<PckCurve> {
    check_thresholds(thresholds)?;
    if errors.is_empty() {
        return Err(Error::contract("PCK of an empty error set"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let values = thresholds
        .iter()
        .map(|&t| sorted.partition_point(|&e| e < t) as f64 / sorted.len() as f64)
        .collect();
    Ok(PckCurve {
        thresholds: thresholds.to_vec(),
        values,
    })
}

/// PCK curve of `pred` against `gt`. Poses are `[..., joints, dims]`.
pub fn pck_curve<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    thresholds: &[f64],
    pooling: PckPooling,
) -> Result<PckCurve> {
    check_thresholds(thresholds)?;
    let errors = joint_errors(pred, gt)?;
    match pooling {
        PckPooling::PerJoint => pck_from_errors(&errors, thresholds),
        PckPooling::PerFrame => {
            let s = pred.shape();
            let joints = if s.len() >= 2 { s[s.len() - 2] } else { 1 };
            let frames: Vec<f64> = errors
                .chunks(joints.max(1))
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect();
            pck_from_errors(&frames, thresholds)
        }
    }
}

impl PckCurve {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.len() != self.values.len() {
            return Err(Error::contract(format!(
                "{} thresholds but {} PCK values",
                self.thresholds.len(),
                self.values.len()
            )));
        }
        check_thresholds(&self.thresholds)
    }

    /// Header `threshold,pck` and one six-decimal row per threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,pck\n");
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            let _ = writeln!(out, "{t:.6},{v:.6}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("threshold,pck") {
            return Err(Error::Format("PCK CSV must start with `threshold,pck`".into()));
        }
        let mut curve = PckCurve {
            thresholds: Vec::new(),
            values: Vec::new(),
        };
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Format(format!("PCK CSV row {}: `{line}`", i + 1));
            let (t, v) = line.split_once(',').ok_or_else(bad)?;
            curve.thresholds.push(t.trim().parse().map_err(|_| bad())?);
            curve.values.push(v.trim().parse().map_err(|_| bad())?);
        }
        curve.validate()?;
        Ok(curve)
    }
}

/// Trapezoidal area under the curve divided by the threshold span.
pub fn auc(curve: &PckCurve) -> Result<f64> {
    curve.validate()?;
    let t = &curve.thresholds;
    if t.len() < 2 {
        return Err(Error::contract("AUC needs at least two thresholds"));
    }
    let span = t[t.len() - 1] - t[0];
    if span <= 0.0 {
        return Err(Error::contract("AUC thresholds span an empty range"));
    }
    let area: f64 = t
        .windows(2)
        .zip(curve.values.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum();
    Ok(area / span)
}
