use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use attreg::data::ply::read_ply;
use attreg::data::store::{write_example, write_manifest, Manifest, ManifestEntry};
use attreg::data::{make_pair, split_categories, toy_models, LabeledModel, OfficialSplit, PairConfig, Regime, SplitMode};
use attreg::geom::PointCloud;
use attreg::RigidTransform;

use crate::common::{as_display, data_error, effective_config, parse_value};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    /// Directory of PLY models: `<category>/{train,test}/*.ply`,
    /// `<category>/*.ply` or flat `*.ply` (category = file stem).
    #[arg(long, conflicts_with = "toy")]
    pub models: Option<PathBuf>,
    /// Use this many procedural toy categories instead of PLY models.
    #[arg(long)]
    pub toy: Option<usize>,
    /// Toy instances per category.
    #[arg(long, default_value_t = 1)]
    pub toy_instances: usize,
    /// Points sampled on each toy model.
    #[arg(long, default_value_t = 2048)]
    pub toy_points: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// clean | noise | crop
    #[arg(long, default_value = "clean", value_parser = parse_value::<Regime>)]
    #[serde(serialize_with = "as_display")]
    pub regime: Regime,
    /// Points per generated cloud before cropping.
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long, default_value_t = 1)]
    pub pairs_per_model: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Category split to draw models from (official | unseen).
    #[arg(long, value_parser = parse_value::<SplitMode>)]
    #[serde(serialize_with = "opt_split")]
    pub split: Option<SplitMode>,
    #[arg(long, value_enum, default_value_t = Subset::All)]
    pub subset: Subset,
    #[arg(long, default_value_t = 80.0)]
    pub rotation_max_deg: f64,
    #[arg(long, default_value_t = 0.5)]
    pub translation_range: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_clip: f64,
    #[arg(long, default_value_t = 0.7)]
    pub crop_fraction: f64,
    /// Largest distance for a noisy/cropped ground-truth correspondence.
    #[arg(long, default_value_t = 0.05)]
    pub correspondence_max_dist: f64,
    /// Neighbors used when normals are (re-)estimated.
    #[arg(long, default_value_t = 10)]
    pub normal_k: usize,
}

fn opt_split<S: serde::Serializer>(v: &Option<SplitMode>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(m) => m.serialize(s),
        None => s.serialize_none(),
    }
}

/// Centers a model and scales it into the unit sphere.
fn normalize(cloud: &PointCloud) -> CliResult<PointCloud> {
    let c = cloud.centroid();
    let centered = attreg::apply_transform(&RigidTransform { rotation: nalgebra::Matrix3::identity(), translation: -c }, cloud);
    let s = centered.max_norm();
    if !(s > 0.0) {
        return Err(data_error("degenerate model (all points coincide)"));
    }
    let positions = centered.positions().iter().map(|p| p / s).collect();
    Ok(PointCloud::new(positions, centered.normals().to_vec())?)
}

fn ply_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| data_error(format!("cannot read {}: {e}", d.display())))?;
        for e in entries {
            let p = e.map_err(|e| data_error(e.to_string()))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn describe(root: &Path, file: &Path) -> (String, String, OfficialSplit) {
    let rel = file.strip_prefix(root).unwrap_or(file);
    let parts: Vec<String> = rel.iter().map(|s| s.to_string_lossy().to_string()).collect();
    let stem = file.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    let split = if parts.iter().any(|p| p == "test") { OfficialSplit::Test } else { OfficialSplit::Train };
    let category = if parts.len() > 1 { parts[0].clone() } else { stem.clone() };
    (category, rel.to_string_lossy().to_string(), split)
}

fn load_models(dir: &Path, normal_k: usize) -> CliResult<Vec<LabeledModel>> {
    let files = ply_files(dir)?;
    if files.is_empty() {
        return Err(data_error(format!("no PLY files under {}", dir.display())));
    }
    let mut models = Vec::new();
    let mut failures = 0;
    for f in &files {
        match read_ply(f, normal_k).map_err(CliError::from).and_then(|c| normalize(&c)) {
            Ok(cloud) => {
                let (category, name, split) = describe(dir, f);
                models.push(LabeledModel { category, name, split, cloud });
            }
            Err(e) => {
                failures += 1;
                eprintln!("warning: skipping {}: {e}", f.display());
            }
        }
    }
    if models.is_empty() {
        return Err(data_error(format!("all {failures} model files failed to load")));
    }
    Ok(models)
}

pub fn run(args: GenArgs) -> CliResult<()> {
    let models = match (&args.models, args.toy) {
        (Some(dir), None) => load_models(dir, args.normal_k)?,
        (None, Some(n)) => toy_models(n, args.toy_instances, args.toy_points, args.seed)?,
        _ => return Err(CliError::Usage("give exactly one of --models or --toy".into())),
    };
    let models = match (args.split, args.subset) {
        (_, Subset::All) => models,
        (None, _) => return Err(CliError::Usage("--subset needs --split".into())),
        (Some(mode), subset) => {
            let s = split_categories(&models, mode)?;
            match subset {
                Subset::Train => s.train,
                Subset::Val => s.val,
                Subset::Test => s.test,
                Subset::All => unreachable!(),
            }
        }
    };
    if models.is_empty() {
        return Err(data_error("the selected subset has no models"));
    }
    let base = PairConfig {
        points_per_cloud: args.points,
        rotation_max_deg: args.rotation_max_deg,
        translation_range: args.translation_range,
        noise_sigma: args.noise_sigma,
        noise_clip: args.noise_clip,
        crop_fraction: args.crop_fraction,
        correspondence_max_dist: args.correspondence_max_dist,
        normal_k: args.normal_k,
        regime: args.regime,
        seed: 0,
    };
    base.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let jobs: Vec<(usize, u64)> = (0..models.len())
        .flat_map(|m| (0..args.pairs_per_model).map(move |_| m))
        .map(|m| (m, rng.random::<u64>()))
        .collect();
    std::fs::create_dir_all(&args.out).map_err(|e| data_error(format!("cannot create {}: {e}", args.out.display())))?;
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, &(m, seed))| {
            let model = &models[m];
            let ex = make_pair(&model.cloud, &model.category, &PairConfig { seed, ..base.clone() })?;
            let dir = format!("{i:05}");
            write_example(args.out.join(&dir), &ex)?;
            Ok(ManifestEntry::describe(&dir, &ex))
        })
        .collect::<attreg::Result<_>>()?;
    let manifest = Manifest {
        tool_version: format!("attreg {}", attreg::VERSION),
        regime: args.regime,
        config: effective_config("gen", &args)?,
        examples: entries,
    };
    write_manifest(&args.out, &manifest)?;
    println!("wrote {} examples to {}", manifest.examples.len(), args.out.display());
    Ok(())
}
