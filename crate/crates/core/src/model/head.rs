//! Per-point descriptors: an edge-convolution encoder over a static kNN
//! graph and a point-wise location encoder, fused into `d` channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dense, mlp, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::geom::{NeighborGraph, PointCloud};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// How the two branches are combined into the final descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Concatenate both branches and project back with a point-wise MLP.
    Mlp,
    /// Elementwise sum of both branches.
    Additive,
    LocationOnly,
    FeatureOnly,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::LocationOnly, Fusion::FeatureOnly, Fusion::Additive, Fusion::Mlp];

    pub fn uses_encoder(self) -> bool {
        self != Fusion::LocationOnly
    }

    pub fn uses_location(self) -> bool {
        self != Fusion::FeatureOnly
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Fusion::Mlp),
            "additive" => Ok(Fusion::Additive),
            "location_only" => Ok(Fusion::LocationOnly),
            "feature_only" => Ok(Fusion::FeatureOnly),
            other => Err(Error::Config(format!(
                "unknown fusion {other:?} (mlp|additive|location_only|feature_only)"
            ))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Mlp => "mlp",
            Fusion::Additive => "additive",
            Fusion::LocationOnly => "location_only",
            Fusion::FeatureOnly => "feature_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d: usize,
    pub k: usize,
    /// Output width of each edge-convolution layer.
    pub encoder_widths: Vec<usize>,
    /// Output widths of the bottleneck MLP applied to the concatenated
    /// encoder layers; the last one must equal `d`.
    pub bottleneck_widths: Vec<usize>,
    /// Output widths of the location encoder; the last one must equal `d`.
    pub locenc_widths: Vec<usize>,
    pub fusion: Fusion,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            d: 128,
            k: 20,
            encoder_widths: vec![64, 64, 128, 256],
            bottleneck_widths: vec![512, 256, 128],
            locenc_widths: vec![16, 32, 64, 128],
            fusion: Fusion::Mlp,
        }
    }
}

/// Position and normal per point.
pub const INPUT_DIM: usize = 6;

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 {
            return Err(Error::Config("feature dim and k must be positive".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be non-empty and positive".into()));
        }
        if self.bottleneck_widths.last() != Some(&self.d) || self.bottleneck_widths.contains(&0) {
            return Err(Error::Config(format!("bottleneck widths must be positive and end at d={}", self.d)));
        }
        if self.locenc_widths.last() != Some(&self.d) || self.locenc_widths.contains(&0) {
            return Err(Error::Config(format!("location encoder widths must be positive and end at d={}", self.d)));
        }
        Ok(())
    }

    /// Registers the parameters this configuration uses under `prefix`.
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        if self.fusion.uses_encoder() {
            let mut c = INPUT_DIM;
            for (l, &w) in self.encoder_widths.iter().enumerate() {
                store.insert_linear(&format!("{prefix}.enc.{l}"), 2 * c, w, rng);
                store.insert_batch_norm(&format!("{prefix}.enc.{l}.bn"), w);
                c = w;
            }
            let mut c: usize = self.encoder_widths.iter().sum();
            for (l, &w) in self.bottleneck_widths.iter().enumerate() {
                store.insert_linear(&format!("{prefix}.bottleneck.{l}"), c, w, rng);
                c = w;
            }
        }
        if self.fusion.uses_location() {
            let mut c = INPUT_DIM;
            for (l, &w) in self.locenc_widths.iter().enumerate() {
                store.insert_linear(&format!("{prefix}.locenc.{l}"), c, w, rng);
                c = w;
            }
        }
        if self.fusion == Fusion::Mlp {
            store.insert_linear(&format!("{prefix}.fuse.0"), 2 * self.d, 2 * self.d, rng);
            store.insert_linear(&format!("{prefix}.fuse.1"), 2 * self.d, self.d, rng);
        }
        Ok(())
    }
}

/// `M×6` matrix of positions and normals.
pub fn cloud_input(cloud: &PointCloud) -> Tensor {
    let data = cloud
        .positions()
        .iter()
        .zip(cloud.normals())
        .flat_map(|(p, n)| [p.x, p.y, p.z, n.x, n.y, n.z])
        .collect();
    Tensor::new(vec![cloud.len(), INPUT_DIM], data).expect("consistent shape")
}

/// One edge-convolution layer: `max_j leaky(W·[x_i ‖ x_j − x_i] + b)`
/// followed by batch norm. The product is split as
/// `x_i·(W₁ − W₂) + x_j·W₂` so the MLP runs once per point rather than once
/// per edge.
fn edgeconv_layer(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, graph: &NeighborGraph) -> Result<Var> {
    let c = g.shape(x)[1];
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    if g.shape(w)[0] != 2 * c {
        return Err(Error::Shape(format!("{prefix}.weight expects {} inputs, got {}", g.shape(w)[0] / 2, c)));
    }
    let out = g.shape(w)[1];
    let (m, k) = (graph.num_points(), graph.k());
    let w_center = g.slice(w, 0, 0, c)?;
    let w_edge = g.slice(w, 0, c, c)?;
    let w_self = g.sub(w_center, w_edge)?;
    let center = g.linear(x, w_self, b)?;
    let center = g.reshape(center, &[m, 1, out])?;
    let edge = g.matmul(x, w_edge)?;
    let neighbors = g.gather(edge, graph.flat())?;
    let neighbors = g.reshape(neighbors, &[m, k, out])?;
    let pre = g.add(neighbors, center)?;
    let act = g.leaky_relu(pre, LEAKY_SLOPE);
    let pooled = g.max_pool(act, 1)?;
    g.batch_norm(store, pooled, &format!("{prefix}.bn"))
}

/// Edge-convolution encoder followed by the bottleneck MLP; `M×d`.
pub fn edgeconv_encode(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeadConfig,
    prefix: &str,
    input: Var,
    graph: &NeighborGraph,
) -> Result<Var> {
    if g.shape(input)[0] != graph.num_points() {
        return Err(Error::Shape(format!(
            "neighbor graph has {} points, input has {}",
            graph.num_points(),
            g.shape(input)[0]
        )));
    }
    let mut x = input;
    let mut layers = Vec::with_capacity(cfg.encoder_widths.len());
    for l in 0..cfg.encoder_widths.len() {
        x = edgeconv_layer(g, store, &format!("{prefix}.enc.{l}"), x, graph)?;
        layers.push(x);
    }
    let cat = g.concat(&layers, 1)?;
    mlp(g, store, &format!("{prefix}.bottleneck"), cat, cfg.bottleneck_widths.len())
}

/// Point-wise MLP over position and normal; `M×d`.
pub fn location_encode(g: &mut Graph, store: &ParamStore, cfg: &HeadConfig, prefix: &str, input: Var) -> Result<Var> {
    mlp(g, store, &format!("{prefix}.locenc"), input, cfg.locenc_widths.len())
}

/// Combines the branch outputs according to `cfg.fusion`. The branch not
/// used by the mode may be `None`.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeadConfig,
    prefix: &str,
    local: Option<Var>,
    loc: Option<Var>,
) -> Result<Var> {
    let missing = |what: &str| Error::Config(format!("fusion {} needs the {what} branch", cfg.fusion));
    match cfg.fusion {
        Fusion::FeatureOnly => local.ok_or_else(|| missing("encoder")),
        Fusion::LocationOnly => loc.ok_or_else(|| missing("location")),
        Fusion::Additive => {
            let (a, b) = (local.ok_or_else(|| missing("encoder"))?, loc.ok_or_else(|| missing("location"))?);
            if g.shape(a) != g.shape(b) {
                return Err(Error::Shape(format!("additive fusion of {:?} and {:?}", g.shape(a), g.shape(b))));
            }
            g.add(a, b)
        }
        Fusion::Mlp => {
            let (a, b) = (local.ok_or_else(|| missing("encoder"))?, loc.ok_or_else(|| missing("location"))?);
            let cat = g.concat(&[a, b], 1)?;
            let h = dense(g, store, &format!("{prefix}.fuse.0"), cat)?;
            let h = g.leaky_relu(h, LEAKY_SLOPE);
            dense(g, store, &format!("{prefix}.fuse.1"), h)
        }
    }
}

/// Full head on one cloud with a precomputed neighbor graph.
pub fn head_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeadConfig,
    prefix: &str,
    cloud: &PointCloud,
    graph: &NeighborGraph,
) -> Result<Var> {
    Ok(head_forward_batch(g, store, cfg, prefix, &[(cloud, graph)])?.remove(0))
}

/// Runs the head once over several clouds, stacked row-wise, so batch norm
/// sees all of them. Returns one `M_i×d` block per cloud.
pub fn head_forward_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeadConfig,
    prefix: &str,
    clouds: &[(&PointCloud, &NeighborGraph)],
) -> Result<Vec<Var>> {
    if clouds.is_empty() {
        return Err(Error::Shape("head over an empty batch".into()));
    }
    for (cloud, graph) in clouds {
        if graph.num_points() != cloud.len() {
            return Err(Error::Shape(format!(
                "neighbor graph has {} points, cloud has {}",
                graph.num_points(),
                cloud.len()
            )));
        }
    }
    let (input, graph) = if clouds.len() == 1 {
        (cloud_input(clouds[0].0), clouds[0].1.clone())
    } else {
        let mut data = Vec::new();
        let mut rows = 0;
        for (cloud, _) in clouds {
            data.extend_from_slice(cloud_input(cloud).data());
            rows += cloud.len();
        }
        let graphs: Vec<&NeighborGraph> = clouds.iter().map(|c| c.1).collect();
        (Tensor::new(vec![rows, INPUT_DIM], data)?, NeighborGraph::stack(&graphs)?)
    };
    let input = g.constant(input);
    let local = if cfg.fusion.uses_encoder() {
        Some(edgeconv_encode(g, store, cfg, prefix, input, &graph)?)
    } else {
        None
    };
    let loc = if cfg.fusion.uses_location() {
        Some(location_encode(g, store, cfg, prefix, input)?)
    } else {
        None
    };
    let out = fuse(g, store, cfg, prefix, local, loc)?;
    if clouds.len() == 1 {
        return Ok(vec![out]);
    }
    let mut start = 0;
    let mut blocks = Vec::with_capacity(clouds.len());
    for (cloud, _) in clouds {
        blocks.push(g.slice(out, 0, start, cloud.len())?);
        start += cloud.len();
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_model;
    use crate::geom::knn;
    use crate::tensor::{grad_check, GradCheck, Mode};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(fusion: Fusion) -> HeadConfig {
        HeadConfig {
            d: 8,
            k: 3,
            encoder_widths: vec![4, 6],
            bottleneck_widths: vec![12, 8],
            locenc_widths: vec![4, 8],
            fusion,
        }
    }

    fn store(cfg: &HeadConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        cfg.init_params(&mut s, "head", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    fn run(cfg: &HeadConfig, s: &ParamStore, cloud: &PointCloud, graph: &NeighborGraph) -> Tensor {
        let mut g = Graph::no_grad(Mode::Train);
        let out = head_forward(&mut g, s, cfg, "head", cloud, graph).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = small(Fusion::FeatureOnly);
        let mut s = store(&cfg, 1);
        let names: Vec<String> = s.names().filter(|n| n.ends_with("weight")).cloned().collect();
        for n in names {
            let shape = s.get(&n).unwrap().value.shape().to_vec();
            s.set_value(&n, Tensor::zeros(&shape)).unwrap();
        }
        let cloud = toy_model(1, 20).unwrap();
        let out = run(&cfg, &s, &cloud, &knn(cloud.positions(), 3).unwrap());
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn permutation_equivariance() {
        for fusion in Fusion::ALL {
            let cfg = small(fusion);
            let s = store(&cfg, 2);
            let cloud = toy_model(2, 30).unwrap();
            let base = run(&cfg, &s, &cloud, &knn(cloud.positions(), 3).unwrap());
            let mut perm: Vec<usize> = (0..30).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
            let shuffled = cloud.select(&perm).unwrap();
            let out = run(&cfg, &s, &shuffled, &knn(shuffled.positions(), 3).unwrap());
            assert_eq!(out.shape(), &[30, 8]);
            for (r, &p) in perm.iter().enumerate() {
                for c in 0..8 {
                    assert!((out.at(r, c) - base.at(p, c)).abs() < 1e-9, "{fusion}");
                }
            }
        }
    }

    #[test]
    fn neighbor_order_is_irrelevant() {
        let cfg = small(Fusion::Mlp);
        let s = store(&cfg, 4);
        let cloud = toy_model(4, 25).unwrap();
        let graph = knn(cloud.positions(), 3).unwrap();
        let rows: Vec<Vec<usize>> = (0..25).map(|i| graph.row(i).iter().rev().copied().collect()).collect();
        let reversed = NeighborGraph::from_rows(&rows).unwrap();
        assert_eq!(run(&cfg, &s, &cloud, &graph), run(&cfg, &s, &cloud, &reversed));
    }

    #[test]
    fn identical_points_identical_location_rows() {
        let cfg = small(Fusion::LocationOnly);
        let s = store(&cfg, 5);
        let cloud = toy_model(5, 10).unwrap();
        let dup = cloud.select(&[0, 1, 2, 0]).unwrap();
        let out = run(&cfg, &s, &dup, &knn(dup.positions(), 2).unwrap());
        assert_eq!(out.row(0), out.row(3));
    }

    #[test]
    fn additive_with_zero_location_is_local_branch() {
        let cfg = small(Fusion::Additive);
        let mut s = store(&cfg, 6);
        for n in ["head.locenc.1.weight", "head.locenc.1.bias"] {
            let shape = s.get(n).unwrap().value.shape().to_vec();
            s.set_value(n, Tensor::zeros(&shape)).unwrap();
        }
        let cloud = toy_model(6, 20).unwrap();
        let graph = knn(cloud.positions(), 3).unwrap();
        let mut g = Graph::no_grad(Mode::Train);
        let input = g.constant(cloud_input(&cloud));
        let local = edgeconv_encode(&mut g, &s, &cfg, "head", input, &graph).unwrap();
        let fused = head_forward(&mut g, &s, &cfg, "head", &cloud, &graph).unwrap();
        assert_eq!(g.value(local), g.value(fused));
    }

    #[test]
    fn location_only_ignores_neighbors() {
        let cfg = small(Fusion::LocationOnly);
        let s = store(&cfg, 7);
        let cloud = toy_model(7, 20).unwrap();
        let graph = knn(cloud.positions(), 3).unwrap();
        let mut rows: Vec<Vec<usize>> = (0..20).map(|i| graph.row(i).to_vec()).collect();
        rows[19] = vec![0, 1, 2];
        let other = NeighborGraph::from_rows(&rows).unwrap();
        assert_eq!(run(&cfg, &s, &cloud, &graph), run(&cfg, &s, &cloud, &other));
    }

    #[test]
    fn graph_size_mismatch_is_shape_error() {
        let cfg = small(Fusion::Mlp);
        let s = store(&cfg, 8);
        let cloud = toy_model(8, 20).unwrap();
        let graph = knn(&cloud.positions()[..10], 3).unwrap();
        let mut g = Graph::no_grad(Mode::Train);
        assert!(matches!(head_forward(&mut g, &s, &cfg, "head", &cloud, &graph), Err(Error::Shape(_))));
    }

    #[test]
    fn default_output_width() {
        let cfg = HeadConfig::default();
        let s = store(&cfg, 9);
        let cloud = toy_model(9, 40).unwrap();
        let out = run(&cfg, &s, &cloud, &knn(cloud.positions(), 20).unwrap());
        assert_eq!(out.shape(), &[40, 128]);
    }

    #[test]
    fn head_gradients() {
        // Finite differences are only meaningful away from leaky-ReLU and
        // max-pool kinks; this seed keeps every such input clear of ±eps.
        let cfg = small(Fusion::Mlp);
        let s = store(&cfg, 12);
        let cloud = toy_model(12, 8).unwrap();
        let graph = knn(cloud.positions(), 3).unwrap();
        let target = Tensor::new(vec![8, 8], (0..64).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect()).unwrap();
        let err = grad_check(&s, GradCheck::default(), |g, p| {
            let out = head_forward(g, p, &cfg, "head", &cloud, &graph)?;
            let t = g.constant(target.clone());
            let prod = g.mul(out, t)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }
}
