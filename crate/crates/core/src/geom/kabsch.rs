//! Weighted least-squares rigid alignment (Kabsch / orthogonal Procrustes).

use nalgebra::{Matrix3, Vector3};

use super::{Point3, RigidTransform};
use crate::error::{Error, Result};

/// Transform minimizing `Σ wᵢ‖R·srcᵢ + t − refᵢ‖²` with `det(R) = +1`.
///
/// A reflection in the SVD solution is removed by flipping the singular
/// direction with the smallest singular value.
pub fn kabsch(src: &[Point3], reference: &[Point3], weights: Option<&[f64]>) -> Result<RigidTransform> {
    if src.len() != reference.len() {
        return Err(Error::Shape(format!(
            "kabsch needs paired lists ({} vs {})",
            src.len(),
            reference.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::InsufficientCorrespondences { needed: 3, got: src.len() });
    }
    let uniform;
    let weights = match weights {
        Some(w) => {
            if w.len() != src.len() {
                return Err(Error::Shape("weight count does not match point count".into()));
            }
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::Numeric("weights must be finite and nonnegative".into()));
            }
            w
        }
        None => {
            uniform = vec![1.0; src.len()];
            &uniform
        }
    };
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric("weights sum to zero".into()));
    }

    let mut cs = Vector3::zeros();
    let mut cr = Vector3::zeros();
    for ((s, r), &w) in src.iter().zip(reference).zip(weights) {
        cs += s * w;
        cr += r * w;
    }
    cs /= total;
    cr /= total;

    let mut h = Matrix3::zeros();
    for ((s, r), &w) in src.iter().zip(reference).zip(weights) {
        h += (s - cs) * (r - cr).transpose() * w;
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v = svd.v_t.expect("svd computed with v_t").transpose();
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        let smallest = svd.singular_values.imin();
        let mut v_fixed = v;
        v_fixed.column_mut(smallest).neg_mut();
        rotation = v_fixed * u.transpose();
    }
    let translation = cr - rotation * cs;
    Ok(RigidTransform { rotation, translation })
}

/// Weighted sum of squared residuals of `t` on the given pairs.
pub fn kabsch_residual(t: &RigidTransform, src: &[Point3], reference: &[Point3], weights: Option<&[f64]>) -> f64 {
    src.iter()
        .zip(reference)
        .enumerate()
        .map(|(i, (s, r))| weights.map_or(1.0, |w| w[i]) * (t.apply_point(s) - r).norm_squared())
        .sum()
}
