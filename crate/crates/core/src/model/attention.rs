//! Alternating self- and cross-attention over the two clouds' descriptors,
//! with weights shared between the branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dense, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub stacks: usize,
    pub heads: usize,
    pub d: usize,
    /// Hidden width of the message MLP.
    pub hidden: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { stacks: 9, heads: 2, d: 128, hidden: 256 }
    }
}

impl AttentionConfig {
    pub fn with_dim(d: usize, stacks: usize) -> Self {
        Self { stacks, heads: 2, d, hidden: 2 * d }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("d={} must be a positive multiple of heads={}", self.d, self.heads)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("message MLP width must be positive".into()));
        }
        Ok(())
    }

    /// Registers the parameters of one layer.
    fn init_layer(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) {
        let d = self.d;
        for proj in ["q", "k", "v", "o"] {
            store.insert_linear(&format!("{prefix}.{proj}"), d, d, rng);
        }
        store.insert_linear(&format!("{prefix}.mlp.0"), 2 * d, self.hidden, rng);
        // Zero output layer: each block starts as batch_norm(x).
        store.insert_linear_zeroed(&format!("{prefix}.mlp.1"), self.hidden, d);
        store.insert_batch_norm(&format!("{prefix}.bn"), d);
    }

    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        for s in 0..self.stacks {
            self.init_layer(store, &format!("{prefix}.{s}.self"), rng);
            self.init_layer(store, &format!("{prefix}.{s}.cross"), rng);
        }
        Ok(())
    }
}

/// Multi-head softmax attention of `x` over `source`, followed by the output
/// projection. Every query attends to every key.
pub fn mha(g: &mut Graph, store: &ParamStore, cfg: &AttentionConfig, prefix: &str, x: Var, source: Var) -> Result<Var> {
    if g.shape(source)[0] == 0 {
        return Err(Error::Size("attention over an empty point set".into()));
    }
    let q = dense(g, store, &format!("{prefix}.q"), x)?;
    let k = dense(g, store, &format!("{prefix}.k"), source)?;
    let v = dense(g, store, &format!("{prefix}.v"), source)?;
    let dh = cfg.d / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        heads.push(g.attention(qh, kh, vh, scale)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    dense(g, store, &format!("{prefix}.o"), cat)
}

/// Residual message-passing block: `batch_norm(x + MLP(x ‖ mha(x, source)))`.
pub fn attention_layer(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &AttentionConfig,
    prefix: &str,
    x: Var,
    source: Var,
) -> Result<Var> {
    let sum = residual(g, store, cfg, prefix, x, source)?;
    g.batch_norm(store, sum, &format!("{prefix}.bn"))
}

/// `x + MLP(x ‖ mha(x, source))`, the block before normalization.
fn residual(g: &mut Graph, store: &ParamStore, cfg: &AttentionConfig, prefix: &str, x: Var, source: Var) -> Result<Var> {
    let m = mha(g, store, cfg, prefix, x, source)?;
    let cat = g.concat(&[x, m], 1)?;
    let h = dense(g, store, &format!("{prefix}.mlp.0"), cat)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let delta = dense(g, store, &format!("{prefix}.mlp.1"), h)?;
    g.add(x, delta)
}

/// Runs all stacks: self-attention within each cloud, then cross-attention
/// in both directions computed from the same inputs.
pub fn augment(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &AttentionConfig,
    prefix: &str,
    f_s: Var,
    f_r: Var,
) -> Result<(Var, Var)> {
    Ok(augment_batch(g, store, cfg, prefix, &[(f_s, f_r)])?[0])
}

/// [`augment`] over several pairs at once. Attention stays within each
/// pair; each layer's batch norm pools the rows of every cloud in the batch.
pub fn augment_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &AttentionConfig,
    prefix: &str,
    pairs: &[(Var, Var)],
) -> Result<Vec<(Var, Var)>> {
    let mut cur: Vec<Var> = pairs.iter().flat_map(|&(s, r)| [s, r]).collect();
    for st in 0..cfg.stacks {
        for (kind, cross) in [("self", false), ("cross", true)] {
            let layer = format!("{prefix}.{st}.{kind}");
            let mut pre = Vec::with_capacity(cur.len());
            for (i, &x) in cur.iter().enumerate() {
                let source = if cross { cur[i ^ 1] } else { x };
                pre.push(residual(g, store, cfg, &layer, x, source)?);
            }
            cur = g.batch_norm_group(store, &pre, &format!("{layer}.bn"))?;
        }
        // Inference graphs only need the current features.
        g.retain_only(&cur);
    }
    Ok(cur.chunks(2).map(|c| (c[0], c[1])).collect())
}
