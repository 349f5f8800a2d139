//! 3D geometry primitives: point clouds, rigid transforms, neighbor search,
//! normal estimation and least-squares rigid alignment.

mod kabsch;
mod kdtree;
mod normals;

pub use kabsch::{kabsch, kabsch_residual};
pub use kdtree::{knn, KdTree, NeighborGraph};
pub use normals::estimate_normals;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

const UNIT_TOL: f64 = 1e-6;

/// A set of 3D positions with one unit normal per position.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point3>,
    normals: Vec<Point3>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, normals: Vec<Point3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Size("point cloud must contain at least one point".into()));
        }
        if positions.len() != normals.len() {
            return Err(Error::Size(format!(
                "{} positions but {} normals",
                positions.len(),
                normals.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Numeric(format!("position {i} is not finite")));
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > UNIT_TOL) {
            return Err(Error::Numeric(format!(
                "normal {i} has norm {} (expected 1)",
                normals[i].norm()
            )));
        }
        Ok(Self { positions, normals })
    }

    /// Builds a cloud from bare positions, estimating normals from `k` neighbors.
    pub fn with_estimated_normals(positions: Vec<Point3>, k: usize) -> Result<Self> {
        let k = k.min(positions.len().saturating_sub(1)).max(1);
        let normals = if positions.len() > 3 {
            estimate_normals(&positions, k.max(3).min(positions.len() - 1))?
        } else {
            vec![Point3::z(); positions.len()]
        };
        Self::new(positions, normals)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn normals(&self) -> &[Point3] {
        &self.normals
    }

    /// Points selected by `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let positions = indices.iter().map(|&i| self.positions[i]).collect();
        let normals = indices.iter().map(|&i| self.normals[i]).collect();
        Self::new(positions, normals)
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.positions)
    }

    /// Largest distance of any point from the origin.
    pub fn max_norm(&self) -> f64 {
        self.positions.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Replaces positions, keeping normals. Used by perturbation routines.
    pub(crate) fn with_positions(&self, positions: Vec<Point3>) -> Result<Self> {
        Self::new(positions, self.normals.clone())
    }
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len().max(1) as f64;
    points.iter().fold(Point3::zeros(), |acc, p| acc + p) / n
}

/// Rotation followed by translation: `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > UNIT_TOL {
            return Err(Error::Numeric(format!(
                "rotation is not orthonormal (max deviation {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > UNIT_TOL {
            return Err(Error::Numeric(format!("rotation determinant is {det}, expected +1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("translation is not finite".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64, translation: Vector3<f64>) -> Self {
        let rotation = if axis.norm() == 0.0 || angle_rad == 0.0 {
            Matrix3::identity()
        } else {
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_rad).into_inner()
        };
        Self { rotation, translation }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn apply_points(&self, points: &[Point3]) -> Vec<Point3> {
        points.iter().map(|p| self.apply_point(p)).collect()
    }

    /// Angle of the rotation part in degrees.
    pub fn rotation_angle_deg(&self) -> f64 {
        rotation_angle(&self.rotation).to_degrees()
    }

    /// Rotation in row-major order.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ]
    }

    pub fn from_row_major(rotation: &[f64; 9], translation: &[f64; 3]) -> Result<Self> {
        Self::new(
            Matrix3::from_row_slice(rotation),
            Vector3::from_column_slice(translation),
        )
    }
}

/// Rotation angle in radians, accurate near zero and near π.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = (skew.norm() / 2.0).min(1.0);
    sin.atan2(cos)
}

/// Maps positions by `R·p + t` and normals by `R·n`.
pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    let positions = t.apply_points(cloud.positions());
    let normals = cloud
        .normals()
        .iter()
        .map(|n| {
            let m = t.rotation * n;
            m / m.norm()
        })
        .collect();
    PointCloud { positions, normals }
}

/// The transform that applies `first`, then `second`.
pub fn compose(second: &RigidTransform, first: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: second.rotation * first.rotation,
        translation: second.rotation * first.translation + second.translation,
    }
}
