//! Binary cross-entropy between the predicted and ground-truth assignment
//! matrices.

use crate::data::GroundTruthMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Predicted entries are clamped to `[CLAMP, 1 − CLAMP]` before the logs.
pub const CLAMP: f64 = 1e-7;

/// Dense ground truth and the mask that drops the slack corner.
fn targets(gt: &GroundTruthMatrix) -> (Tensor, Tensor) {
    let shape = [gt.source_len() + 1, gt.reference_len() + 1];
    let target = Tensor::new(shape.to_vec(), gt.dense()).expect("dense ground truth fits its shape");
    let mut mask = Tensor::full(&shape, 1.0);
    let last = mask.len() - 1;
    mask.data_mut()[last] = 0.0;
    (target, mask)
}

fn check_shape(shape: &[usize], gt: &GroundTruthMatrix) -> Result<()> {
    if shape != [gt.source_len() + 1, gt.reference_len() + 1] {
        return Err(Error::Shape(format!(
            "assignment {shape:?} does not match ground truth {}×{} plus slack",
            gt.source_len(),
            gt.reference_len()
        )));
    }
    Ok(())
}

/// `−Σ g·log ĉ + (1−g)·log(1−ĉ)` over every entry except the slack corner.
pub fn bce_loss(g: &mut Graph, c: Var, gt: &GroundTruthMatrix) -> Result<Var> {
    check_shape(g.shape(c), gt)?;
    let (target, mask) = targets(gt);
    let mut negative = mask.clone();
    for (n, t) in negative.data_mut().iter_mut().zip(target.data()) {
        *n -= t;
    }
    let c = g.clamp(c, CLAMP, 1.0 - CLAMP);
    let log_c = g.log(c)?;
    let neg_c = g.scale(c, -1.0);
    let one_minus = g.add_scalar(neg_c, 1.0);
    let log_1mc = g.log(one_minus)?;
    let t = g.constant(target);
    let n = g.constant(negative);
    let pos = g.mul(t, log_c)?;
    let neg = g.mul(n, log_1mc)?;
    let total = g.add(pos, neg)?;
    let s = g.sum(total);
    Ok(g.scale(s, -1.0))
}

/// [`bce_loss`] on plain values.
pub fn bce_loss_value(c: &Tensor, gt: &GroundTruthMatrix) -> Result<f64> {
    check_shape(c.shape(), gt)?;
    let (target, mask) = targets(gt);
    let mut loss = 0.0;
    for ((&p, &t), &m) in c.data().iter().zip(target.data()).zip(mask.data()) {
        if m == 0.0 {
            continue;
        }
        let p = p.clamp(CLAMP, 1.0 - CLAMP);
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(loss)
}
