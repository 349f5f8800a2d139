use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use super::{crop_count, GroundTruthMatrix, PairConfig, Regime, RegistrationExample};
use crate::error::{Error, Result};
use crate::geom::{apply_transform, estimate_normals, KdTree, Point3, PointCloud, RigidTransform};

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
    Vector3::new(x, y, z)
}

/// Rotation about a uniformly random axis by an angle uniform in
/// `[0, rotation_max_deg]`, translation uniform per axis in
/// `[-translation_range, translation_range]`.
pub fn random_transform(rotation_max_deg: f64, translation_range: f64, rng: &mut impl Rng) -> RigidTransform {
    let axis = unit_vector(rng);
    let angle = rng.random_range(0.0..=rotation_max_deg).to_radians();
    let mut t = Vector3::zeros();
    for v in t.iter_mut() {
        *v = rng.random_range(-translation_range..=translation_range);
    }
    RigidTransform::from_axis_angle(axis, angle, t)
}

/// Keeps the `⌊fraction·M⌋` points lying furthest along a random direction,
/// i.e. one side of a random cutting plane. Point order is preserved.
pub fn crop_plane(cloud: &PointCloud, fraction: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("crop fraction {fraction} not in (0, 1]")));
    }
    let normal = unit_vector(rng);
    let keep = crop_count(cloud.len(), fraction);
    if keep == cloud.len() {
        return Ok(cloud.clone());
    }
    let center = cloud.centroid();
    let dist: Vec<f64> = cloud.positions().iter().map(|p| normal.dot(&(p - center))).collect();
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    cloud.select(&kept)
}

/// Adds Gaussian noise (std `sigma`, clamped to `±clip`) to every coordinate
/// and re-estimates normals from `normal_k` neighbors.
pub fn add_noise(cloud: &PointCloud, sigma: f64, clip: f64, normal_k: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !(clip >= 0.0) {
        return Err(Error::Config("noise sigma and clip must be nonnegative".into()));
    }
    let positions: Vec<Point3> = if sigma == 0.0 {
        cloud.positions().to_vec()
    } else {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        cloud
            .positions()
            .iter()
            .map(|p| p.map(|v| v + normal.sample(rng).clamp(-clip, clip)))
            .collect()
    };
    if positions.len() <= 3 {
        return cloud.with_positions(positions);
    }
    let k = normal_k.clamp(3, positions.len() - 1);
    let normals = estimate_normals(&positions, k)?;
    PointCloud::new(positions, normals)
}

/// Ground-truth correspondences between noisy clouds: mutual nearest
/// neighbors first, then remaining nearest-neighbor pairs among still
/// unmatched points in ascending distance order, all within `max_dist`
/// after mapping the source by `gt`.
pub fn establish_correspondences(
    source: &PointCloud,
    reference: &PointCloud,
    gt: &RigidTransform,
    max_dist: f64,
) -> Result<GroundTruthMatrix> {
    if !(max_dist > 0.0) {
        return Err(Error::Config("max_dist must be positive".into()));
    }
    let moved = gt.apply_points(source.positions());
    let refs = reference.positions();
    let (m, n) = (moved.len(), refs.len());
    let max_d2 = max_dist * max_dist;

    let ref_tree = KdTree::new(refs);
    let src_tree = KdTree::new(&moved);
    let nn_s: Vec<(usize, f64)> = moved.iter().map(|p| ref_tree.nearest(p).expect("non-empty")).collect();
    let nn_r: Vec<(usize, f64)> = refs.iter().map(|p| src_tree.nearest(p).expect("non-empty")).collect();

    let mut src_match = vec![None; m];
    let mut ref_match = vec![None; n];
    for (i, &(j, d2)) in nn_s.iter().enumerate() {
        if nn_r[j].0 == i && d2 <= max_d2 {
            src_match[i] = Some(j);
            ref_match[j] = Some(i);
        }
    }

    let free_src: Vec<usize> = (0..m).filter(|&i| src_match[i].is_none()).collect();
    let free_ref: Vec<usize> = (0..n).filter(|&j| ref_match[j].is_none()).collect();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    if !free_src.is_empty() && !free_ref.is_empty() {
        let free_ref_pts: Vec<Point3> = free_ref.iter().map(|&j| refs[j]).collect();
        let free_src_pts: Vec<Point3> = free_src.iter().map(|&i| moved[i]).collect();
        let rt = KdTree::new(&free_ref_pts);
        let st = KdTree::new(&free_src_pts);
        for (a, p) in free_src_pts.iter().enumerate() {
            let (b, d2) = rt.nearest(p).expect("non-empty");
            candidates.push((d2, free_src[a], free_ref[b]));
        }
        for (b, p) in free_ref_pts.iter().enumerate() {
            let (a, d2) = st.nearest(p).expect("non-empty");
            candidates.push((d2, free_src[a], free_ref[b]));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    for (d2, i, j) in candidates {
        if d2 <= max_d2 && src_match[i].is_none() && ref_match[j].is_none() {
            src_match[i] = Some(j);
            ref_match[j] = Some(i);
        }
    }
    let matches = src_match.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
    GroundTruthMatrix::new(m, n, matches)
}

/// `size` distinct indices in random order.
pub fn sample_subset(len: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if size > len {
        return Err(Error::Size(format!("cannot sample {size} of {len} points")));
    }
    Ok(sample(rng, len, size).into_vec())
}

/// One registration pair drawn from `model` under `config`. Deterministic in
/// `(model, config)`; the RNG is seeded from `config.seed` alone.
pub fn make_pair(model: &PointCloud, label: &str, config: &PairConfig) -> Result<RegistrationExample> {
    config.validate()?;
    let p = config.points_per_cloud;
    if model.len() < p {
        return Err(Error::Size(format!(
            "model {label:?} has {} points, {} required",
            model.len(),
            p
        )));
    }
    if model.max_norm() > 1.0 + config.noise_clip + 1e-9 {
        return Err(Error::Config(format!(
            "model {label:?} is not scaled to the unit sphere (max norm {})",
            model.max_norm()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gt = random_transform(config.rotation_max_deg, config.translation_range, &mut rng);

    let (source, reference, gt_matrix) = match config.regime {
        Regime::Clean => {
            let subset = sample_subset(model.len(), p, &mut rng)?;
            let mut order: Vec<usize> = (0..p).collect();
            order.shuffle(&mut rng);
            let source = model.select(&subset)?;
            let shuffled: Vec<usize> = order.iter().map(|&k| subset[k]).collect();
            let reference = apply_transform(&gt, &model.select(&shuffled)?);
            // reference point r holds source point order[r]
            let matches = order.iter().enumerate().map(|(r, &s)| (s, r)).collect();
            (source, reference, GroundTruthMatrix::new(p, p, matches)?)
        }
        Regime::Noise | Regime::Crop => {
            let a = sample_subset(model.len(), p, &mut rng)?;
            let b = sample_subset(model.len(), p, &mut rng)?;
            let mut source = add_noise(&model.select(&a)?, config.noise_sigma, config.noise_clip, config.normal_k, &mut rng)?;
            let moved = apply_transform(&gt, &model.select(&b)?);
            let mut reference = add_noise(&moved, config.noise_sigma, config.noise_clip, config.normal_k, &mut rng)?;
            if config.regime == Regime::Crop {
                source = crop_plane(&source, config.crop_fraction, &mut rng)?;
                reference = crop_plane(&reference, config.crop_fraction, &mut rng)?;
            }
            let gt_matrix = establish_correspondences(&source, &reference, &gt, config.correspondence_max_dist)?;
            (source, reference, gt_matrix)
        }
    };
    Ok(RegistrationExample {
        source,
        reference,
        gt_transform: gt,
        gt_matrix,
        label: label.to_string(),
        seed: config.seed,
    })
}
