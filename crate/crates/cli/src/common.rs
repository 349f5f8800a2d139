use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use serde::Serialize;

use attreg::data::store::write_json;
use attreg::model::{AttentionConfig, Fusion, ModelConfig};
use attreg::train::AdamWConfig;

use crate::{CliError, CliResult};

/// `{tool_version, command, args}` recorded in every artifact.
pub fn effective_config<T: Serialize>(command: &str, args: &T) -> CliResult<serde_json::Value> {
    Ok(serde_json::json!({
        "tool_version": format!("attreg {}", attreg::VERSION),
        "command": command,
        "args": serde_json::to_value(args).map_err(|e| CliError::Usage(e.to_string()))?,
    }))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    Ok(write_json(path, value)?)
}

/// Wall-clock figures go next to an artifact rather than into it, so the
/// artifact itself stays byte-identical across reruns.
pub fn timing_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".timing.json");
    PathBuf::from(s)
}

pub fn parse_value<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

/// `rot,trans` recall thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub rot_deg: f64,
    pub trans: f64,
}

impl FromStr for Thresholds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(',').ok_or("expected ROT_DEG,TRANS")?;
        let rot_deg: f64 = a.trim().parse().map_err(|_| format!("bad rotation threshold {a:?}"))?;
        let trans: f64 = b.trim().parse().map_err(|_| format!("bad translation threshold {b:?}"))?;
        if !(rot_deg > 0.0 && trans > 0.0) {
            return Err("thresholds must be positive".into());
        }
        Ok(Self { rot_deg, trans })
    }
}

/// Network architecture flags.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Feature dimension. 128 gives the full-size head; other values scale
    /// the encoder widths with it.
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    /// Attention stacks (self + cross each).
    #[arg(long, default_value_t = 9)]
    pub stacks: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Neighbors per point in the local encoder.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// mlp | additive | location_only | feature_only
    #[arg(long, default_value = "mlp", value_parser = parse_value::<Fusion>)]
    #[serde(serialize_with = "as_display")]
    pub fusion: Fusion,
    #[arg(long, default_value_t = 10)]
    pub sinkhorn_iterations: usize,
    /// Match threshold on assignment scores.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 3)]
    pub min_matches: usize,
}

pub fn as_display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

impl ModelArgs {
    pub fn config(&self) -> CliResult<ModelConfig> {
        let mut cfg = if self.d == 128 {
            let mut c = ModelConfig::default();
            c.head.k = self.k;
            c.attention = AttentionConfig { stacks: self.stacks, ..c.attention };
            c
        } else {
            ModelConfig::small(self.d, self.stacks, self.k)
        };
        cfg.attention.heads = self.heads;
        cfg.head.fusion = self.fusion;
        cfg.sinkhorn_iterations = self.sinkhorn_iterations;
        cfg.match_threshold = self.threshold;
        cfg.min_matches = self.min_matches;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimizer and schedule flags shared by `train` and `ablate`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// AdamW learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Seed for weight initialization and example order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub eval_every: u64,
    /// Network passes per validation registration.
    #[arg(long, default_value_t = 2)]
    pub val_iterations: usize,
    /// Validation recall thresholds ROT_DEG,TRANS.
    #[arg(long, default_value = "5,0.05", value_parser = parse_value::<Thresholds>)]
    pub val_thresholds: Thresholds,
}

impl OptimArgs {
    pub fn config(&self) -> attreg::train::TrainConfig {
        attreg::train::TrainConfig {
            optimizer: AdamWConfig { learning_rate: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() },
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            eval_every: self.eval_every,
            val_rot_thresh_deg: self.val_thresholds.rot_deg,
            val_trans_thresh: self.val_thresholds.trans,
            val_iterations: self.val_iterations,
        }
    }
}

pub fn data_error(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}
