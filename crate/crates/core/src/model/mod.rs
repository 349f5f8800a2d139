//! The registration network: feature head, attention augmentation and the
//! optimal-transport matcher, with all weights held in one [`ParamStore`].

pub mod attention;
pub mod head;
pub mod matcher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{augment, augment_batch, AttentionConfig};
pub use head::{Fusion, HeadConfig};
pub use matcher::{extract_matches, Correspondence, CorrespondenceSet, MATCH_THRESHOLD, MIN_MATCHES, SINKHORN_ITERATIONS};

use crate::error::{Error, Result};
use crate::geom::{knn, NeighborGraph, PointCloud};
use crate::tensor::{Graph, Mode, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Name of the learnable slack score.
pub const SLACK_PARAM: &str = "slack";

/// `x·W + b` with parameters `{prefix}.weight` / `{prefix}.bias`.
pub(crate) fn dense(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.linear(x, w, b)
}

/// `layers` dense layers `{prefix}.0 …` with leaky ReLU between them.
pub(crate) fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, layers: usize) -> Result<Var> {
    let mut h = x;
    for l in 0..layers {
        if l > 0 {
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        h = dense(g, store, &format!("{prefix}.{l}"), h)?;
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: HeadConfig,
    pub attention: AttentionConfig,
    pub sinkhorn_iterations: usize,
    pub match_threshold: f64,
    pub min_matches: usize,
    pub slack_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            attention: AttentionConfig::default(),
            sinkhorn_iterations: SINKHORN_ITERATIONS,
            match_threshold: MATCH_THRESHOLD,
            min_matches: MIN_MATCHES,
            slack_init: 1.0,
        }
    }
}

impl ModelConfig {
    /// A reduced network: feature dim `d`, `stacks` attention stacks and
    /// `k` neighbors, with encoder widths scaled down accordingly.
    pub fn small(d: usize, stacks: usize, k: usize) -> Self {
        let half = (d / 2).max(1);
        Self {
            head: HeadConfig {
                d,
                k,
                encoder_widths: vec![half, half, d],
                bottleneck_widths: vec![2 * d, d],
                locenc_widths: vec![half, d, d],
                fusion: Fusion::Mlp,
            },
            attention: AttentionConfig::with_dim(d, stacks),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.attention.validate()?;
        if self.head.d != self.attention.d {
            return Err(Error::Config(format!(
                "head dim {} differs from attention dim {}",
                self.head.d, self.attention.d
            )));
        }
        if self.sinkhorn_iterations == 0 {
            return Err(Error::Config("sinkhorn_iterations must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return Err(Error::Config(format!("match threshold {} not in [0, 1]", self.match_threshold)));
        }
        if self.min_matches < 3 {
            return Err(Error::Config("min_matches must be at least 3".into()));
        }
        Ok(())
    }

    /// Smallest cloud the network accepts.
    pub fn min_points(&self) -> usize {
        self.head.k + 1
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub features_source: Var,
    pub features_reference: Var,
    pub scores: Var,
    pub log_assignment: Var,
    pub assignment: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.head.init_params(&mut params, "head", &mut rng)?;
        config.attention.init_params(&mut params, "attn", &mut rng)?;
        params.insert(SLACK_PARAM, Tensor::full(&[1, 1], config.slack_init), true);
        params.round_to_f32();
        Ok(Self { config, params })
    }

    fn neighbor_graph(&self, cloud: &PointCloud) -> Result<NeighborGraph> {
        if cloud.len() < self.config.min_points() {
            return Err(Error::Size(format!(
                "cloud has {} points, the network needs at least {} (k + 1)",
                cloud.len(),
                self.config.min_points()
            )));
        }
        knn(cloud.positions(), self.config.head.k)
    }

    /// Records the full network on `g`.
    pub fn forward(&self, g: &mut Graph, source: &PointCloud, reference: &PointCloud) -> Result<ForwardOutput> {
        self.forward_with(g, &self.params, source, reference)
    }

    /// As [`Model::forward`] with an explicit parameter store (used for
    /// finite-difference checks).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        source: &PointCloud,
        reference: &PointCloud,
    ) -> Result<ForwardOutput> {
        Ok(self.forward_batch(g, params, &[(source, reference)])?.remove(0))
    }

    /// Records the network for several pairs in one graph. Batch norm in
    /// training mode pools statistics over every cloud of the batch.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        pairs: &[(&PointCloud, &PointCloud)],
    ) -> Result<Vec<ForwardOutput>> {
        let cfg = &self.config;
        let graphs = pairs
            .iter()
            .map(|(s, r)| Ok((self.neighbor_graph(s)?, self.neighbor_graph(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let clouds: Vec<(&PointCloud, &NeighborGraph)> = pairs
            .iter()
            .zip(&graphs)
            .flat_map(|((s, r), (gs, gr))| [(*s, gs), (*r, gr)])
            .collect();
        let feats = head::head_forward_batch(g, params, &cfg.head, "head", &clouds)?;
        let feats: Vec<(Var, Var)> = feats.chunks(2).map(|c| (c[0], c[1])).collect();
        let feats = attention::augment_batch(g, params, &cfg.attention, "attn", &feats)?;
        let slack = g.param(params, SLACK_PARAM)?;
        feats
            .into_iter()
            .map(|(fs, fr)| {
                let scores = matcher::similarity(g, fs, fr)?;
                let log_assignment = matcher::sinkhorn_slack_log(g, scores, slack, cfg.sinkhorn_iterations)?;
                let assignment = g.exp(log_assignment);
                Ok(ForwardOutput { features_source: fs, features_reference: fr, scores, log_assignment, assignment })
            })
            .collect()
    }

    /// Inference-mode assignment matrix `(M+1)×(N+1)`.
    pub fn predict(&self, source: &PointCloud, reference: &PointCloud) -> Result<Tensor> {
        let mut g = Graph::no_grad(Mode::Eval);
        let out = self.forward(&mut g, source, reference)?;
        Ok(g.value(out.assignment).clone())
    }

    pub fn slack(&self) -> f64 {
        self.params.get(SLACK_PARAM).map(|p| p.value.item()).unwrap_or(self.config.slack_init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_model;

    #[test]
    fn forward_shapes_and_marginals() {
        let model = Model::new(ModelConfig::small(16, 1, 4), 1).unwrap();
        let (a, b) = (toy_model(1, 20).unwrap(), toy_model(2, 15).unwrap());
        let p = model.predict(&a, &b).unwrap();
        assert_eq!(p.shape(), &[21, 16]);
        for i in 0..20 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn undersized_cloud_is_size_error() {
        let model = Model::new(ModelConfig::small(16, 1, 8), 1).unwrap();
        let (a, b) = (toy_model(1, 8).unwrap(), toy_model(2, 20).unwrap());
        assert!(matches!(model.predict(&a, &b), Err(Error::Size(_))));
    }

    #[test]
    fn seeded_init_is_reproducible_and_f32() {
        let a = Model::new(ModelConfig::small(16, 2, 4), 7).unwrap();
        let b = Model::new(ModelConfig::small(16, 2, 4), 7).unwrap();
        assert_eq!(a, b);
        for (_, p) in a.params.iter() {
            assert!(p.value.data().iter().all(|&v| v as f32 as f64 == v));
        }
        assert_eq!(a.slack(), 1.0);
    }

    #[test]
    fn batched_forward_pools_statistics_only_in_training() {
        let model = Model::new(ModelConfig::small(16, 1, 4), 3).unwrap();
        let clouds: Vec<PointCloud> = (0..4).map(|s| toy_model(s, 12 + s as usize).unwrap()).collect();
        let pairs = [(&clouds[0], &clouds[1]), (&clouds[2], &clouds[3])];
        let run = |mode: Mode| {
            let mut g = Graph::no_grad(mode);
            let batched: Vec<Tensor> = model
                .forward_batch(&mut g, &model.params, &pairs)
                .unwrap()
                .iter()
                .map(|o| g.value(o.assignment).clone())
                .collect();
            let single: Vec<Tensor> = pairs
                .iter()
                .map(|(s, r)| {
                    let mut g = Graph::no_grad(mode);
                    let o = model.forward(&mut g, s, r).unwrap();
                    g.value(o.assignment).clone()
                })
                .collect();
            batched
                .iter()
                .zip(&single)
                .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max)
        };
        assert!(run(Mode::Eval) < 1e-12);
        assert!(run(Mode::Train) > 1e-6);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut cfg = ModelConfig::small(16, 1, 4);
        cfg.attention.d = 8;
        cfg.attention.hidden = 16;
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    }
}
