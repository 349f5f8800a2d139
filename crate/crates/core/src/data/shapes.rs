//! Procedural stand-in models: unions of a few randomly placed ellipsoids,
//! sampled on the outer surface with analytic normals and scaled to fit the
//! unit sphere. Each category fixes a layout; instances perturb it.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use super::{LabeledModel, OfficialSplit};
use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};

#[derive(Debug, Clone)]
struct Ellipsoid {
    center: Vector3<f64>,
    radii: Vector3<f64>,
    rotation: Matrix3<f64>,
}

impl Ellipsoid {
    fn contains(&self, p: &Point3) -> bool {
        let local = self.rotation.transpose() * (p - self.center);
        local.component_div(&self.radii).norm_squared() < 1.0
    }

    fn approx_area(&self) -> f64 {
        let [a, b, c] = [self.radii.x, self.radii.y, self.radii.z];
        // Knud Thomsen's approximation.
        let p = 1.6075;
        let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
        4.0 * std::f64::consts::PI * m.powf(1.0 / p)
    }
}

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    *Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(x, y, z)), angle).matrix()
}

fn layout(category_seed: u64) -> Vec<Ellipsoid> {
    let mut rng = ChaCha8Rng::seed_from_u64(category_seed);
    let count = rng.random_range(3..=5);
    (0..count)
        .map(|i| {
            let spread = if i == 0 { 0.0 } else { 0.6 };
            let center = Vector3::from_fn(|_, _| rng.random_range(-spread..=spread));
            let radii = Vector3::from_fn(|_, _| rng.random_range(0.15..=0.6));
            Ellipsoid { center, radii, rotation: random_rotation(&mut rng) }
        })
        .collect()
}

fn perturb(base: &[Ellipsoid], rng: &mut impl Rng) -> Vec<Ellipsoid> {
    base.iter()
        .map(|e| Ellipsoid {
            center: e.center + Vector3::from_fn(|_, _| rng.random_range(-0.05..=0.05)),
            radii: e.radii.map(|r| r * rng.random_range(0.9..=1.1)),
            rotation: e.rotation,
        })
        .collect()
}

fn sample_surface(parts: &[Ellipsoid], n_points: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    let areas: Vec<f64> = parts.iter().map(Ellipsoid::approx_area).collect();
    let total: f64 = areas.iter().sum();
    let mut positions = Vec::with_capacity(n_points);
    let mut normals = Vec::with_capacity(n_points);
    let max_tries = 1000 * n_points.max(1);
    let mut tries = 0;
    while positions.len() < n_points {
        tries += 1;
        if tries > max_tries {
            return Err(Error::Numeric("toy shape surface sampling did not converge".into()));
        }
        let mut pick = rng.random_range(0.0..total);
        let mut idx = 0;
        while idx + 1 < parts.len() && pick >= areas[idx] {
            pick -= areas[idx];
            idx += 1;
        }
        let e = &parts[idx];
        let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
        let u = Vector3::new(x, y, z);
        let p = e.center + e.rotation * u.component_mul(&e.radii);
        if parts.iter().enumerate().any(|(j, o)| j != idx && o.contains(&p)) {
            continue;
        }
        positions.push(p);
        normals.push((e.rotation * u.component_div(&e.radii)).normalize());
    }
    let c = crate::geom::centroid(&positions);
    let scale = positions.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    let positions = positions.into_iter().map(|p| (p - c) / scale).collect();
    PointCloud::new(positions, normals)
}

/// A single toy model of `n_points` surface samples inside the unit sphere.
pub fn toy_model(seed: u64, n_points: usize) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    sample_surface(&layout(seed), n_points, &mut rng)
}

/// `categories × per_category` toy models. Category `c` is named
/// `toy_<c>`; its instances share an ellipsoid layout up to small jitter.
/// The last instance of each category is marked as test-side when there is
/// more than one.
pub fn toy_models(categories: usize, per_category: usize, n_points: usize, seed: u64) -> Result<Vec<LabeledModel>> {
    let mut out = Vec::with_capacity(categories * per_category);
    for c in 0..categories {
        let cat_seed = seed.wrapping_mul(1_000_003).wrapping_add(c as u64);
        let base = layout(cat_seed);
        for i in 0..per_category {
            let mut rng = ChaCha8Rng::seed_from_u64(cat_seed.wrapping_mul(7919).wrapping_add(i as u64 + 1));
            let parts = if i == 0 { base.clone() } else { perturb(&base, &mut rng) };
            out.push(LabeledModel {
                category: format!("toy_{c:03}"),
                name: format!("toy_{c:03}_{i:03}"),
                split: if per_category > 1 && i + 1 == per_category { OfficialSplit::Test } else { OfficialSplit::Train },
                cloud: sample_surface(&parts, n_points, &mut rng)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_model_is_normalized() {
        let m = toy_model(1, 500).unwrap();
        assert_eq!(m.len(), 500);
        assert!((m.max_norm() - 1.0).abs() < 1e-9 || m.max_norm() < 1.0 + 1e-9);
        assert!(m.centroid().norm() < 1e-9);
    }

    #[test]
    fn toy_models_are_deterministic_and_labeled() {
        let a = toy_models(3, 2, 64, 7).unwrap();
        let b = toy_models(3, 2, 64, 7).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert_eq!(a[2].category, "toy_001");
        assert_ne!(a[0].cloud, a[1].cloud);
    }

    #[test]
    fn normals_point_outward() {
        let m = toy_model(3, 400).unwrap();
        let c = m.centroid();
        let outward = m.positions().iter().zip(m.normals()).filter(|(p, n)| n.dot(&(*p - c)) > 0.0).count();
        assert!(outward as f64 > 0.7 * m.len() as f64);
    }
}
