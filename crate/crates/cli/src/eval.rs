use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use attreg::data::store::load_dataset;
use attreg::data::RegistrationExample;
use attreg::geom::{kabsch, Point3};
use attreg::metrics::{EvalRecord, EvalReport};
use attreg::model::Model;
use attreg::pipeline::{icp, register};
use attreg::train::load_weights;
use attreg::RigidTransform;

use crate::common::{effective_config, parse_value, save_json, timing_path, Thresholds};
use crate::register::IcpFlags;
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Network,
    Icp,
    /// Pose from the ground-truth correspondences.
    Oracle,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Checkpoint (network method only).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output prefix: writes OUT.json, OUT.csv and OUT.timing.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Network)]
    pub method: Method,
    /// Network passes per registration.
    #[arg(long, default_value_t = 2)]
    pub iterations: usize,
    /// Recall thresholds ROT_DEG,TRANS.
    #[arg(long, default_value = "1,0.1", value_parser = parse_value::<Thresholds>)]
    pub thresholds: Thresholds,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_matches: Option<usize>,
    #[command(flatten)]
    pub icp: IcpFlags,
}

/// Pose and validity for one example.
fn solve(method: Method, model: Option<&Model>, args: &EvalArgs, ex: &RegistrationExample) -> attreg::Result<(RigidTransform, bool, usize)> {
    match method {
        Method::Network => {
            let r = register(model.expect("model loaded"), &ex.source, &ex.reference, args.iterations)?;
            Ok((r.transform, r.valid, r.correspondences.len()))
        }
        Method::Icp => {
            let r = icp(&ex.source, &ex.reference, &RigidTransform::identity(), &args.icp.config())?;
            Ok((r.transform, !r.no_progress, 0))
        }
        Method::Oracle => {
            let m = ex.gt_matrix.matches();
            if m.len() < 3 {
                return Ok((RigidTransform::identity(), false, m.len()));
            }
            let s: Vec<Point3> = m.iter().map(|&(i, _)| ex.source.positions()[i]).collect();
            let r: Vec<Point3> = m.iter().map(|&(_, j)| ex.reference.positions()[j]).collect();
            Ok((kabsch(&s, &r, None)?, true, m.len()))
        }
    }
}

pub fn run(args: EvalArgs) -> CliResult<()> {
    let config = effective_config("eval", &args)?;
    let model = match args.method {
        Method::Network => {
            let path = args.weights.as_ref().ok_or_else(|| CliError::Usage("--weights is required for the network".into()))?;
            let mut m = load_weights(path)?.model;
            if let Some(t) = args.threshold {
                m.config.match_threshold = t;
            }
            if let Some(k) = args.min_matches {
                m.config.min_matches = k;
            }
            m.config.validate()?;
            Some(m)
        }
        _ => None,
    };
    let (manifest, examples) = load_dataset(&args.data)?;
    let started = Instant::now();
    let records: Vec<EvalRecord> = examples
        .par_iter()
        .zip(&manifest.examples)
        .map(|(ex, entry)| {
            let (t, valid, n) = solve(args.method, model.as_ref(), &args, ex)?;
            EvalRecord::new(&entry.dir, &t, &ex.gt_transform, &ex.source, &ex.reference, valid, n)
        })
        .collect::<attreg::Result<_>>()?;
    let seconds = started.elapsed().as_secs_f64();
    let report = EvalReport::new(records, args.thresholds.rot_deg, args.thresholds.trans)?;

    let with_ext = |ext: &str| {
        let mut s = args.out.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    let json_path = with_ext(".json");
    save_json(&json_path, &serde_json::json!({ "config": config, "report": report }))?;
    report.write_csv(with_ext(".csv"))?;
    let n = report.records.len();
    save_json(
        &timing_path(&json_path),
        &serde_json::json!({ "seconds": seconds, "registrations": n, "registrations_per_second": n as f64 / seconds.max(1e-12) }),
    )?;
    let s = &report.summary;
    println!(
        "RR {:.4} (valid {:.1}%)  MIE(R) {:?}  MIE(t) {:?}  CCD {:?}  [{} examples]",
        s.rr,
        100.0 * s.valid_fraction,
        s.mie_r,
        s.mie_t,
        s.ccd,
        s.count
    );
    Ok(())
}
