use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use attreg::data::store::load_dataset;
use attreg::model::Model;
use attreg::train::{load_weights_for, train, Checkpoint, TrainData, TrainOptions};

use crate::common::{effective_config, ModelArgs, OptimArgs};
use crate::CliResult;

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Training dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset directory; enables best-checkpoint tracking.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Best-by-validation checkpoint [default: OUT.best].
    #[arg(long)]
    pub best: Option<PathBuf>,
    /// JSON-lines log [default: OUT.log.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

fn with_suffix(p: &std::path::Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(args: TrainArgs) -> CliResult<()> {
    let model_cfg = args.model.config()?;
    let cfg = args.optim.config();
    cfg.validate()?;
    let start = match &args.resume {
        Some(p) => load_weights_for(p, &model_cfg)?,
        None => Checkpoint::from_model(Model::new(model_cfg, args.optim.seed)?),
    };
    let (_, train_set) = load_dataset(&args.data)?;
    let val = match &args.val {
        Some(p) => load_dataset(p)?.1,
        None => Vec::new(),
    };
    let opts = TrainOptions {
        log: Some(args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"))),
        last: Some(args.out.clone()),
        best: (!val.is_empty()).then(|| args.best.clone().unwrap_or_else(|| with_suffix(&args.out, ".best"))),
        log_header: Some(effective_config("train", &args)?),
    };
    let out = train(start, &TrainData::Fixed(train_set), &val, &cfg, &opts)?;
    if let Some(last) = out.history.last() {
        println!("epoch {} loss {:.4} val_rr {:?}", last.epoch, last.loss, last.val_rr);
    }
    Ok(())
}
