//! Registration error metrics and report aggregation.
//!
//! Rotation errors are in degrees. Error means are taken over valid
//! registrations only; recall counts every example, invalid ones as
//! failures.

use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{rotation_angle, KdTree, PointCloud, RigidTransform};

/// Default clip radius on squared distances for [`ccd`].
pub const CCD_CLIP: f64 = 0.1;
/// Default recall thresholds: rotation (degrees) and translation.
pub const RR_THRESHOLDS: (f64, f64) = (1.0, 0.1);

/// How the numbers in an [`EvalReport`] are defined.
pub const REPORT_CONVENTION: &str = "mie_r: angle of gt_R^T pred_R in degrees; \
mie_t: |pred_t - gt_t|; mae_r: mean |difference| of intrinsic Z-Y-X Euler angles \
in degrees (wrapped to [-180, 180]); mae_t: mean |component difference| of \
translations; ccd: clipped chamfer distance on squared distances between the \
transformed source and the reference; error means over valid registrations \
only; rr over all examples with invalid ones counted as failures";

/// Isotropic errors: relative rotation angle and translation distance.
pub fn mie(pred: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let delta = gt.rotation.transpose() * pred.rotation;
    (rotation_angle(&delta).to_degrees(), (pred.translation - gt.translation).norm())
}

/// Intrinsic Z-Y-X Euler angles `[yaw, pitch, roll]` in radians with
/// `R = Rz(yaw)·Ry(pitch)·Rx(roll)`. Within 1e-6 of pitch ±90° the roll is
/// set to zero and folded into the yaw.
pub fn euler_zyx(r: &Matrix3<f64>) -> [f64; 3] {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    if (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6 {
        return [(-r[(0, 1)]).atan2(r[(1, 1)]), pitch, 0.0];
    }
    [r[(1, 0)].atan2(r[(0, 0)]), pitch, r[(2, 1)].atan2(r[(2, 2)])]
}

fn wrap_deg(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

/// Anisotropic errors: mean absolute Euler-angle and translation-component
/// differences.
pub fn mae(pred: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let (a, b) = (euler_zyx(&pred.rotation), euler_zyx(&gt.rotation));
    let rot = (0..3).map(|k| wrap_deg((a[k] - b[k]).to_degrees()).abs()).sum::<f64>() / 3.0;
    let trans = (pred.translation - gt.translation).abs().sum() / 3.0;
    (rot, trans)
}

fn clipped_one_way(from: &[crate::geom::Point3], tree: &KdTree, r: f64) -> f64 {
    from.iter().map(|p| tree.nearest(p).map_or(r, |(_, d2)| d2.min(r))).sum()
}

/// Clipped chamfer distance: for each point of either cloud the squared
/// distance to the nearest point of the other, clipped at `r`, summed.
pub fn ccd(x_hat: &PointCloud, y: &PointCloud, r: f64) -> Result<f64> {
    if x_hat.is_empty() || y.is_empty() {
        return Err(Error::Size("chamfer distance of an empty cloud".into()));
    }
    if !(r > 0.0) {
        return Err(Error::Config(format!("clip radius must be positive, got {r}")));
    }
    let (tx, ty) = (KdTree::new(x_hat.positions()), KdTree::new(y.positions()));
    Ok(clipped_one_way(x_hat.positions(), &ty, r) + clipped_one_way(y.positions(), &tx, r))
}

/// Errors of one registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub name: String,
    pub valid: bool,
    pub num_matches: usize,
    pub mie_r: f64,
    pub mie_t: f64,
    pub mae_r: f64,
    pub mae_t: f64,
    pub ccd: f64,
}

impl EvalRecord {
    /// Scores `pred` against `gt`; the chamfer term moves `source` by `pred`.
    pub fn new(
        name: impl Into<String>,
        pred: &RigidTransform,
        gt: &RigidTransform,
        source: &PointCloud,
        reference: &PointCloud,
        valid: bool,
        num_matches: usize,
    ) -> Result<Self> {
        let (mie_r, mie_t) = mie(pred, gt);
        let (mae_r, mae_t) = mae(pred, gt);
        let moved = crate::geom::apply_transform(pred, source);
        Ok(Self {
            name: name.into(),
            valid,
            num_matches,
            mie_r,
            mie_t,
            mae_r,
            mae_t,
            ccd: ccd(&moved, reference, CCD_CLIP)?,
        })
    }

    pub fn succeeded(&self, rot_thresh_deg: f64, trans_thresh: f64) -> bool {
        self.valid && self.mae_r < rot_thresh_deg && self.mae_t < trans_thresh
    }
}

/// Fraction of all records that are valid and within both thresholds.
pub fn registration_recall(records: &[EvalRecord], rot_thresh_deg: f64, trans_thresh: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Undefined("registration recall of an empty set".into()));
    }
    if !(rot_thresh_deg > 0.0 && trans_thresh > 0.0) {
        return Err(Error::Config("recall thresholds must be positive".into()));
    }
    let hits = records.iter().filter(|r| r.succeeded(rot_thresh_deg, trans_thresh)).count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub valid_fraction: f64,
    pub rr: f64,
    pub rot_thresh_deg: f64,
    pub trans_thresh: f64,
    /// Means over valid records; `None` when there are none.
    pub mie_r: Option<f64>,
    pub mie_t: Option<f64>,
    pub mae_r: Option<f64>,
    pub mae_t: Option<f64>,
    pub ccd: Option<f64>,
}

impl Summary {
    pub fn new(records: &[EvalRecord], rot_thresh_deg: f64, trans_thresh: f64) -> Result<Self> {
        let rr = registration_recall(records, rot_thresh_deg, trans_thresh)?;
        let valid: Vec<&EvalRecord> = records.iter().filter(|r| r.valid).collect();
        let mean = |f: fn(&EvalRecord) -> f64| {
            (!valid.is_empty()).then(|| valid.iter().map(|r| f(r)).sum::<f64>() / valid.len() as f64)
        };
        Ok(Self {
            count: records.len(),
            valid_fraction: valid.len() as f64 / records.len() as f64,
            rr,
            rot_thresh_deg,
            trans_thresh,
            mie_r: mean(|r| r.mie_r),
            mie_t: mean(|r| r.mie_t),
            mae_r: mean(|r| r.mae_r),
            mae_t: mean(|r| r.mae_t),
            ccd: mean(|r| r.ccd),
        })
    }
}

/// Per-example records plus aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub convention: String,
    pub summary: Summary,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn new(records: Vec<EvalRecord>, rot_thresh_deg: f64, trans_thresh: f64) -> Result<Self> {
        let summary = Summary::new(&records, rot_thresh_deg, trans_thresh)?;
        Ok(Self { convention: REPORT_CONVENTION.to_string(), summary, records })
    }

    /// One CSV row per record, with a header line.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
