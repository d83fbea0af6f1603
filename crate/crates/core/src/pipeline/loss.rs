//! Per-joint Euclidean losses.

use crate::config::LossReduction;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) || tape.shape(a).len() < 2 {
        return Err(Error::dim(format!(
            "pose shapes {:?} and {:?} do not match",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Per-frame pose error of `[..., J, D]` poses: the mean (or sum) over
/// joints of the Euclidean distance. Returns the leading `[...]` shape.
pub fn frame_errors<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    reduction: LossReduction,
) -> Result<Var> {
    same_shape(tape, pred, gt)?;
    let rank = tape.shape(pred).len();
    let diff = tape.sub(pred, gt)?;
    let sq = tape.square(diff);
    let d2 = tape.sum(sq, &[rank - 1])?;
    let d = tape.sqrt(d2);
    match reduction {
        LossReduction::Mean => tape.mean(d, &[rank - 2]),
        LossReduction::Sum => tape.sum(d, &[rank - 2]),
    }
}

/// `α·L_2D + L_3D`, averaged over frames.
#[allow(clippy::too_many_arguments)]
pub fn step1<T: Scalar>(
    tape: &mut Tape<T>,
    pred2d: Var,
    gt2d: Var,
    pred3d: Var,
    gt3d: Var,
    alpha: f64,
    reduction: LossReduction,
) -> Result<Var> {
    let e2 = frame_errors(tape, pred2d, gt2d, reduction)?;
    let e3 = frame_errors(tape, pred3d, gt3d, reduction)?;
    if tape.shape(e2) != tape.shape(e3) {
        return Err(Error::dim(format!(
            "2D poses cover {:?} frames but 3D poses {:?}",
            tape.shape(e2),
            tape.shape(e3)
        )));
    }
    let weighted = tape.scale(e2, T::of(alpha));
    let total = tape.add(weighted, e3)?;
    tape.mean_all(total)
}

/// Mean over frames of the per-frame 3D error.
pub fn step2<T: Scalar>(
    tape: &mut Tape<T>,
    pred3d: Var,
    gt3d: Var,
    reduction: LossReduction,
) -> Result<Var> {
    let e = frame_errors(tape, pred3d, gt3d, reduction)?;
    tape.mean_all(e)
}

/// Value of [`step1`] on plain tensors with mean reduction.
pub fn loss_step1<T: Scalar>(
    pred2d: &Tensor<T>,
    gt2d: &Tensor<T>,
    pred3d: &Tensor<T>,
    gt3d: &Tensor<T>,
    alpha: f64,
) -> Result<T> {
    let mut tape = Tape::new();
    let v = [pred2d, gt2d, pred3d, gt3d].map(|t| tape.leaf(t));
    let l = step1(&mut tape, v[0], v[1], v[2], v[3], alpha, LossReduction::Mean)?;
    Ok(tape.item(l))
}

/// Value of [`step2`] on plain tensors with mean reduction.
pub fn loss_step2<T: Scalar>(pred3d: &Tensor<T>, gt3d: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let (p, g) = (tape.leaf(pred3d), tape.leaf(gt3d));
    let l = step2(&mut tape, p, g, LossReduction::Mean)?;
    Ok(tape.item(l))
}
