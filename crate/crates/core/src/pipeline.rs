//! End-to-end registration: network forward pass, hard matches, pose from
//! matches, iterative refinement and resampling on failure. Also a plain
//! point-to-point ICP used as a baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::sample_subset;
use crate::error::{Error, Result};
use crate::geom::{apply_transform, compose, kabsch, KdTree, Point3, PointCloud, RigidTransform};
use crate::model::matcher::{assignment, extract_matches};
use crate::model::{Correspondence, CorrespondenceSet, Model};
use crate::tensor::Tensor;

/// Settings for turning an assignment matrix into a pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub threshold: f64,
    pub min_matches: usize,
    /// Weight each match by its assignment score in the pose fit.
    pub weighted: bool,
}

impl MatchConfig {
    pub fn from_model(model: &Model) -> Self {
        Self { threshold: model.config.match_threshold, min_matches: model.config.min_matches, weighted: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Maps source coordinates into the reference frame.
    pub transform: RigidTransform,
    /// Matches of the last network pass, indexed into the input clouds.
    pub correspondences: CorrespondenceSet,
    pub valid: bool,
    /// Number of network passes run.
    pub iterations_used: usize,
    /// Pose increment of each valid pass, in order.
    pub per_iteration: Vec<RigidTransform>,
    /// Resampling attempts made (1 unless resampling was requested).
    pub attempts: usize,
}

impl RegistrationResult {
    fn invalid(correspondences: CorrespondenceSet) -> Self {
        Self {
            transform: RigidTransform::identity(),
            correspondences,
            valid: false,
            iterations_used: 1,
            per_iteration: Vec::new(),
            attempts: 1,
        }
    }
}

/// Hard matches from `assignment` and, when there are enough of them, the
/// least-squares pose they imply. Invalid results carry the identity.
pub fn pose_from_assignment(
    source: &PointCloud,
    reference: &PointCloud,
    assignment: &Tensor,
    cfg: &MatchConfig,
) -> Result<RegistrationResult> {
    if assignment.shape() != [source.len() + 1, reference.len() + 1] {
        return Err(Error::Shape(format!(
            "assignment {:?} does not fit clouds of {} and {} points",
            assignment.shape(),
            source.len(),
            reference.len()
        )));
    }
    let matches = extract_matches(assignment, cfg.threshold);
    if !matches.is_valid(cfg.min_matches) {
        return Ok(RegistrationResult::invalid(matches));
    }
    let src: Vec<Point3> = matches.pairs.iter().map(|c| source.positions()[c.source]).collect();
    let dst: Vec<Point3> = matches.pairs.iter().map(|c| reference.positions()[c.reference]).collect();
    let weights: Vec<f64> = matches.pairs.iter().map(|c| c.score).collect();
    let transform = kabsch(&src, &dst, cfg.weighted.then_some(weights.as_slice()))?;
    Ok(RegistrationResult {
        transform,
        correspondences: matches,
        valid: true,
        iterations_used: 1,
        per_iteration: vec![transform],
        attempts: 1,
    })
}

/// Registration from given per-point features, bypassing the network:
/// dot-product scores, slack Sinkhorn, hard matches, pose.
pub fn register_from_features(
    source: &PointCloud,
    reference: &PointCloud,
    f_s: &Tensor,
    f_r: &Tensor,
    slack: f64,
    sinkhorn_iterations: usize,
    cfg: &MatchConfig,
) -> Result<RegistrationResult> {
    if f_s.rows() != source.len() || f_r.rows() != reference.len() || f_s.cols() != f_r.cols() {
        return Err(Error::Shape(format!(
            "features {:?} / {:?} do not fit clouds of {} and {} points",
            f_s.shape(),
            f_r.shape(),
            source.len(),
            reference.len()
        )));
    }
    let scores = f_s.matmul(&f_r.transposed())?;
    let p = assignment(&scores, slack, sinkhorn_iterations)?;
    pose_from_assignment(source, reference, &p, cfg)
}

/// One inference pass of the network.
pub fn register_once(model: &Model, source: &PointCloud, reference: &PointCloud) -> Result<RegistrationResult> {
    let p = model.predict(source, reference)?;
    pose_from_assignment(source, reference, &p, &MatchConfig::from_model(model))
}

/// `iterations` passes, each on the source moved by the composition so far.
/// Stops at the first invalid pass and returns the last valid composition
/// with `valid = false`.
pub fn register(
    model: &Model,
    source: &PointCloud,
    reference: &PointCloud,
    iterations: usize,
) -> Result<RegistrationResult> {
    if iterations == 0 {
        return Err(Error::Config("registration needs at least one iteration".into()));
    }
    let mut total = RigidTransform::identity();
    let mut per_iteration = Vec::with_capacity(iterations);
    let mut last = None;
    for it in 0..iterations {
        let moved = if it == 0 { source.clone() } else { apply_transform(&total, source) };
        let step = register_once(model, &moved, reference)?;
        let valid = step.valid;
        if valid {
            total = compose(&step.transform, &total);
            per_iteration.push(step.transform);
        }
        last = Some((step.correspondences, valid, it + 1));
        if !valid {
            break;
        }
    }
    let (correspondences, valid, iterations_used) = last.expect("at least one iteration");
    Ok(RegistrationResult { transform: total, correspondences, valid, iterations_used, per_iteration, attempts: 1 })
}

/// Repeats [`register`] on fresh random subsets of both clouds until a valid
/// result is found or `attempts` are used up. Correspondence indices refer
/// to the full input clouds.
pub fn register_with_resample(
    model: &Model,
    source: &PointCloud,
    reference: &PointCloud,
    attempts: usize,
    sample_size: usize,
    iterations: usize,
    rng: &mut impl Rng,
) -> Result<RegistrationResult> {
    if attempts == 0 {
        return Err(Error::Config("resampling needs at least one attempt".into()));
    }
    let mut result = None;
    for attempt in 1..=attempts {
        let si = sample_subset(source.len(), sample_size.min(source.len()), rng)?;
        let ri = sample_subset(reference.len(), sample_size.min(reference.len()), rng)?;
        let mut r = register(model, &source.select(&si)?, &reference.select(&ri)?, iterations)?;
        for c in &mut r.correspondences.pairs {
            *c = Correspondence { source: si[c.source], reference: ri[c.reference], score: c.score };
        }
        r.correspondences.pairs.sort_by_key(|c| c.source);
        r.attempts = attempt;
        let done = r.valid;
        result = Some(r);
        if done {
            break;
        }
    }
    Ok(result.expect("at least one attempt"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Pairs farther apart than this are ignored.
    pub max_pair_dist: f64,
    /// Stop once the mean squared residual changes by less than this.
    pub convergence_eps: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iterations: 50, max_pair_dist: 0.1, convergence_eps: 1e-8 }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.max_pair_dist > 0.0) || !(self.convergence_eps > 0.0) {
            return Err(Error::Config("ICP settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    pub converged: bool,
    /// Too few pairs survived the distance gate to take a step.
    pub no_progress: bool,
    pub mean_squared_residual: f64,
}

/// Point-to-point ICP starting from `init`.
pub fn icp(source: &PointCloud, reference: &PointCloud, init: &RigidTransform, cfg: &IcpConfig) -> Result<IcpResult> {
    cfg.validate()?;
    let tree = KdTree::new(reference.positions());
    let max_d2 = cfg.max_pair_dist * cfg.max_pair_dist;
    let mut current = *init;
    let mut prev_mse = f64::INFINITY;
    let mut mse = f64::INFINITY;
    for it in 1..=cfg.max_iterations {
        let moved = current.apply_points(source.positions());
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for p in &moved {
            let (j, d2) = tree.nearest(p).expect("reference is non-empty");
            if d2 <= max_d2 {
                src.push(*p);
                dst.push(reference.positions()[j]);
            }
        }
        if src.len() < 3 {
            return Ok(IcpResult { transform: current, iterations: it, converged: false, no_progress: true, mean_squared_residual: mse });
        }
        let step = kabsch(&src, &dst, None)?;
        current = compose(&step, &current);
        mse = src.iter().zip(&dst).map(|(s, d)| (step.apply_point(s) - d).norm_squared()).sum::<f64>() / src.len() as f64;
        if (prev_mse - mse).abs() < cfg.convergence_eps {
            return Ok(IcpResult { transform: current, iterations: it, converged: true, no_progress: false, mean_squared_residual: mse });
        }
        prev_mse = mse;
    }
    Ok(IcpResult {
        transform: current,
        iterations: cfg.max_iterations,
        converged: false,
        no_progress: false,
        mean_squared_residual: mse,
    })
}
