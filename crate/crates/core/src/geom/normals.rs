use nalgebra::{Matrix3, SymmetricEigen};

use super::{centroid, knn, Point3};
use crate::error::{Error, Result};

/// Per-point normals from a local plane fit over the point and its `k`
/// nearest neighbors, oriented away from the cloud centroid.
///
/// A neighborhood of coincident points yields the fallback normal `(0, 0, 1)`.
pub fn estimate_normals(points: &[Point3], k: usize) -> Result<Vec<Point3>> {
    if k < 3 {
        return Err(Error::Size(format!("normal estimation needs k >= 3 (got {k})")));
    }
    let graph = knn(points, k)?;
    let center = centroid(points);
    let normals = (0..points.len())
        .map(|i| {
            let hood: Vec<Point3> = std::iter::once(points[i])
                .chain(graph.row(i).iter().map(|&j| points[j]))
                .collect();
            let mean = centroid(&hood);
            let mut cov = Matrix3::zeros();
            for p in &hood {
                let d = p - mean;
                cov += d * d.transpose();
            }
            if cov.abs().max() <= 1e-24 {
                return Point3::z();
            }
            let eig = SymmetricEigen::new(cov);
            let n: Point3 = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
            let n = n / n.norm();
            if n.dot(&(points[i] - center)) < 0.0 {
                -n
            } else {
                n
            }
        })
        .collect();
    Ok(normals)
}
