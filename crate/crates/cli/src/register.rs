use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use attreg::data::ply::{read_ply, DEFAULT_NORMAL_K};
use attreg::geom::{centroid, Point3, PointCloud};
use attreg::model::Correspondence;
use attreg::pipeline::{icp, register, register_with_resample, IcpConfig};
use attreg::train::load_weights;
use attreg::RigidTransform;

use crate::common::{effective_config, save_json, timing_path};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Network,
    Icp,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IcpFlags {
    #[arg(long, default_value_t = 50)]
    pub icp_max_iterations: usize,
    /// Pairs farther apart than this (after scaling) are ignored.
    #[arg(long, default_value_t = 0.1)]
    pub icp_max_pair_dist: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub icp_eps: f64,
}

impl IcpFlags {
    pub fn config(&self) -> IcpConfig {
        IcpConfig { max_iterations: self.icp_max_iterations, max_pair_dist: self.icp_max_pair_dist, convergence_eps: self.icp_eps }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RegisterArgs {
    /// Checkpoint (required for the network path).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Result JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Baseline::Network)]
    pub baseline: Baseline,
    /// Network passes.
    #[arg(long, default_value_t = 2)]
    pub iterations: usize,
    /// Override the checkpoint's match threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Override the checkpoint's minimum match count.
    #[arg(long)]
    pub min_matches: Option<usize>,
    /// Retry on fresh random subsets this many times in total.
    #[arg(long, default_value_t = 1)]
    pub attempts: usize,
    /// Subset size per attempt when retrying.
    #[arg(long, default_value_t = 1024)]
    pub sample_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the clouds as given instead of scaling them into the unit sphere.
    #[arg(long)]
    pub no_scale: bool,
    #[arg(long, default_value_t = DEFAULT_NORMAL_K)]
    pub normal_k: usize,
    #[command(flatten)]
    pub icp: IcpFlags,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IcpArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_scale: bool,
    #[arg(long, default_value_t = DEFAULT_NORMAL_K)]
    pub normal_k: usize,
    #[command(flatten)]
    pub icp: IcpFlags,
}

/// Maps both clouds by `p ↦ (p − c)/s` with `c` the joint centroid and `s`
/// the largest distance from it.
#[derive(Debug, Clone, Copy, Serialize)]
struct Normalization {
    center: [f64; 3],
    scale: f64,
}

impl Normalization {
    fn fit(a: &PointCloud, b: &PointCloud) -> CliResult<Self> {
        let all: Vec<Point3> = a.positions().iter().chain(b.positions()).copied().collect();
        let c = centroid(&all);
        let s = all.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
        if !(s > 0.0) || !s.is_finite() {
            return Err(CliError::Data("degenerate input clouds".into()));
        }
        Ok(Self { center: c.into(), scale: s })
    }

    fn identity() -> Self {
        Self { center: [0.0; 3], scale: 1.0 }
    }

    fn apply(&self, cloud: &PointCloud) -> CliResult<PointCloud> {
        let c = Vector3::from(self.center);
        let pos = cloud.positions().iter().map(|p| (p - c) / self.scale).collect();
        Ok(PointCloud::new(pos, cloud.normals().to_vec())?)
    }

    /// The transform between the original clouds given the one between
    /// their normalized versions.
    fn undo(&self, t: &RigidTransform) -> RigidTransform {
        let c = Vector3::from(self.center);
        RigidTransform { rotation: t.rotation, translation: self.scale * t.translation + c - t.rotation * c }
    }
}

#[derive(Debug, Serialize)]
struct MatchOut {
    source: usize,
    reference: usize,
    score: f64,
}

#[derive(Debug, Serialize)]
struct RegisterOutput {
    config: serde_json::Value,
    method: Baseline,
    rotation: [f64; 9],
    translation: [f64; 3],
    valid: bool,
    iterations_used: usize,
    attempts: usize,
    normalization: Normalization,
    matches: Vec<MatchOut>,
    /// ICP only.
    icp_converged: Option<bool>,
    icp_no_progress: Option<bool>,
}

fn load_pair(source: &PathBuf, reference: &PathBuf, k: usize, no_scale: bool) -> CliResult<(PointCloud, PointCloud, Normalization)> {
    let (s, r) = (read_ply(source, k)?, read_ply(reference, k)?);
    let norm = if no_scale { Normalization::identity() } else { Normalization::fit(&s, &r)? };
    Ok((norm.apply(&s)?, norm.apply(&r)?, norm))
}

fn emit(out: &Option<PathBuf>, result: &RegisterOutput, seconds: f64) -> CliResult<()> {
    match out {
        Some(path) => {
            save_json(path, result)?;
            save_json(&timing_path(path), &serde_json::json!({ "seconds": seconds }))?;
        }
        None => {
            println!("{}", serde_json::to_string_pretty(result).map_err(|e| CliError::Data(e.to_string()))?);
            eprintln!("registration took {seconds:.3} s");
        }
    }
    Ok(())
}

fn icp_output(config: serde_json::Value, s: &PointCloud, r: &PointCloud, norm: Normalization, flags: &IcpFlags) -> CliResult<RegisterOutput> {
    let res = icp(s, r, &RigidTransform::identity(), &flags.config())?;
    let t = norm.undo(&res.transform);
    Ok(RegisterOutput {
        config,
        method: Baseline::Icp,
        rotation: t.rotation_row_major(),
        translation: t.translation.into(),
        valid: !res.no_progress,
        iterations_used: res.iterations,
        attempts: 1,
        normalization: norm,
        matches: Vec::new(),
        icp_converged: Some(res.converged),
        icp_no_progress: Some(res.no_progress),
    })
}

pub fn run(args: RegisterArgs) -> CliResult<()> {
    let config = effective_config("register", &args)?;
    let (s, r, norm) = load_pair(&args.source, &args.reference, args.normal_k, args.no_scale)?;
    let started = Instant::now();
    let result = match args.baseline {
        Baseline::Icp => icp_output(config, &s, &r, norm, &args.icp)?,
        Baseline::Network => {
            let path = args.weights.as_ref().ok_or_else(|| CliError::Usage("--weights is required for the network".into()))?;
            let mut model = load_weights(path)?.model;
            if let Some(t) = args.threshold {
                model.config.match_threshold = t;
            }
            if let Some(m) = args.min_matches {
                model.config.min_matches = m;
            }
            model.config.validate()?;
            let res = if args.attempts > 1 {
                let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                register_with_resample(&model, &s, &r, args.attempts, args.sample_size, args.iterations, &mut rng)?
            } else {
                register(&model, &s, &r, args.iterations)?
            };
            let t = norm.undo(&res.transform);
            RegisterOutput {
                config,
                method: Baseline::Network,
                rotation: t.rotation_row_major(),
                translation: t.translation.into(),
                valid: res.valid,
                iterations_used: res.iterations_used,
                attempts: res.attempts,
                normalization: norm,
                matches: res
                    .correspondences
                    .pairs
                    .iter()
                    .map(|&Correspondence { source, reference, score }| MatchOut { source, reference, score })
                    .collect(),
                icp_converged: None,
                icp_no_progress: None,
            }
        }
    };
    emit(&args.out, &result, started.elapsed().as_secs_f64())
}

pub fn run_icp(args: IcpArgs) -> CliResult<()> {
    let config = effective_config("icp", &args)?;
    let (s, r, norm) = load_pair(&args.source, &args.reference, args.normal_k, args.no_scale)?;
    let started = Instant::now();
    let result = icp_output(config, &s, &r, norm, &args.icp)?;
    emit(&args.out, &result, started.elapsed().as_secs_f64())
}
