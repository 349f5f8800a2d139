use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use attreg::data::store::load_dataset;
use attreg::metrics::{EvalRecord, Summary};
use attreg::model::{Fusion, Model};
use attreg::pipeline::register;
use attreg::train::{save_weights, train, Checkpoint, TrainData, TrainOptions};

use crate::common::{effective_config, parse_value, save_json, ModelArgs, OptimArgs, Thresholds};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset the variants are compared on.
    #[arg(long)]
    pub val: PathBuf,
    /// Output prefix: writes OUT.json, OUT.csv and one checkpoint per variant.
    #[arg(long)]
    pub out: PathBuf,
    /// Network passes per registration when comparing.
    #[arg(long, default_value_t = 2)]
    pub iterations: usize,
    #[arg(long, default_value = "1,0.1", value_parser = parse_value::<Thresholds>)]
    pub thresholds: Thresholds,
    /// `--fusion` is ignored; every variant is trained.
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub fusion: String,
    pub mie_r: Option<f64>,
    pub mie_t: Option<f64>,
    pub rr: f64,
    pub valid_fraction: f64,
    pub final_loss: f64,
}

pub fn row_name(f: Fusion) -> &'static str {
    match f {
        Fusion::LocationOnly => "location encoder",
        Fusion::FeatureOnly => "feature encoder",
        Fusion::Additive => "additive fusion",
        Fusion::Mlp => "MLP fusion",
    }
}

fn with_suffix(p: &std::path::Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn run(args: AblateArgs) -> CliResult<()> {
    let config = effective_config("ablate", &args)?;
    let cfg = args.optim.config();
    cfg.validate()?;
    let (_, train_set) = load_dataset(&args.data)?;
    let (val_manifest, val) = load_dataset(&args.val)?;
    if val.is_empty() {
        return Err(CliError::Data("comparison set is empty".into()));
    }
    let data = TrainData::Fixed(train_set);

    let mut rows = Vec::new();
    for fusion in Fusion::ALL {
        let model_cfg = ModelArgs { fusion, ..args.model.clone() }.config()?;
        let start = Checkpoint::from_model(Model::new(model_cfg, args.optim.seed)?);
        // Same seed, data order and budget for every variant.
        let outcome = train(start, &data, &[], &cfg, &TrainOptions { log: None, last: None, best: None, log_header: None })?;
        save_weights(&outcome.last, with_suffix(&args.out, &format!(".{fusion}.weights")))?;
        let model = &outcome.last.model;
        let records: Vec<EvalRecord> = val
            .par_iter()
            .zip(&val_manifest.examples)
            .map(|(ex, entry)| {
                let r = register(model, &ex.source, &ex.reference, args.iterations)?;
                EvalRecord::new(&entry.dir, &r.transform, &ex.gt_transform, &ex.source, &ex.reference, r.valid, r.correspondences.len())
            })
            .collect::<attreg::Result<_>>()?;
        let s = Summary::new(&records, args.thresholds.rot_deg, args.thresholds.trans)?;
        rows.push(AblationRow {
            variant: row_name(fusion),
            fusion: fusion.to_string(),
            mie_r: s.mie_r,
            mie_t: s.mie_t,
            rr: s.rr,
            valid_fraction: s.valid_fraction,
            final_loss: outcome.history.last().map_or(f64::NAN, |h| h.loss),
        });
    }

    save_json(&with_suffix(&args.out, ".json"), &serde_json::json!({ "config": config, "rows": rows }))?;
    let csv_path = with_suffix(&args.out, ".csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;

    println!("{:<18} {:>10} {:>10} {:>8}", "variant", "MIE(R)", "MIE(t)", "RR");
    for r in &rows {
        println!("{:<18} {:>10} {:>10} {:>7.2}%", r.variant, fmt_opt(r.mie_r), fmt_opt(r.mie_t), 100.0 * r.rr);
    }
    Ok(())
}
