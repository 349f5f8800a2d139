//! Dot-product scores, slack-augmented Sinkhorn assignment and hard-match
//! extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, Tensor, Var};

/// `S = F_s·F_rᵀ`.
pub fn similarity(g: &mut Graph, f_s: Var, f_r: Var) -> Result<Var> {
    let (a, b) = (g.shape(f_s), g.shape(f_r));
    if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
        return Err(Error::Shape(format!("similarity of {a:?} and {b:?}")));
    }
    let rt = g.transpose(f_r)?;
    g.matmul(f_s, rt)
}

/// Row and column log-marginals for an `m×n` score matrix padded with a
/// slack row and column: every real point carries mass 1 and each slack
/// bin can absorb all points of the other side.
pub fn slack_marginals(m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rows = vec![0.0; m + 1];
    rows[m] = (n as f64).ln();
    let mut cols = vec![0.0; n + 1];
    cols[n] = (m as f64).ln();
    (rows, cols)
}

/// Log of the `(m+1)×(n+1)` assignment matrix: `scores` padded with the
/// scalar `slack`, then `iterations` rounds of log-domain Sinkhorn.
pub fn sinkhorn_slack_log(g: &mut Graph, scores: Var, slack: Var, iterations: usize) -> Result<Var> {
    if !g.value(scores).is_finite() || !g.value(slack).is_finite() {
        return Err(Error::Numeric("non-finite score matrix".into()));
    }
    let (m, n) = (g.shape(scores)[0], g.shape(scores)[1]);
    let padded = g.pad_slack(scores, slack)?;
    let (mu, nu) = slack_marginals(m, n);
    g.sinkhorn(padded, &mu, &nu, iterations)
}

/// The `(m+1)×(n+1)` assignment matrix with entries in `[0, 1]`.
pub fn sinkhorn_slack(g: &mut Graph, scores: Var, slack: Var, iterations: usize) -> Result<Var> {
    let log_p = sinkhorn_slack_log(g, scores, slack, iterations)?;
    Ok(g.exp(log_p))
}

/// Evaluates [`sinkhorn_slack`] on plain values.
pub fn assignment(scores: &Tensor, slack: f64, iterations: usize) -> Result<Tensor> {
    if scores.rank() != 2 {
        return Err(Error::Shape(format!("scores must be a matrix, got {:?}", scores.shape())));
    }
    let mut g = Graph::no_grad(Mode::Eval);
    let s = g.constant(scores.clone());
    let a = g.constant(Tensor::scalar(slack));
    let p = sinkhorn_slack(&mut g, s, a, iterations)?;
    Ok(g.value(p).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub source: usize,
    pub reference: usize,
    pub score: f64,
}

/// Hard one-to-one matches, ordered by source index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// At least `min_matches` pairs.
    pub fn is_valid(&self, min_matches: usize) -> bool {
        self.pairs.len() >= min_matches
    }

    pub fn index_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|c| (c.source, c.reference)).collect()
    }
}

/// Pairs `(i, j)` of the non-slack block with `c[i][j] > t_m` that are the
/// strict maximum of both their row and their column (slack excluded).
pub fn extract_matches(c: &Tensor, t_m: f64) -> CorrespondenceSet {
    let (rows, cols) = (c.rows(), c.cols());
    if rows < 2 || cols < 2 {
        return CorrespondenceSet::default();
    }
    let (m, n) = (rows - 1, cols - 1);
    // Column j's strict maximum row, if unique.
    let mut col_best: Vec<Option<usize>> = vec![None; n];
    for (j, best) in col_best.iter_mut().enumerate() {
        let mut top = (f64::NEG_INFINITY, None);
        let mut tied = false;
        for i in 0..m {
            let v = c.at(i, j);
            if v > top.0 {
                top = (v, Some(i));
                tied = false;
            } else if v == top.0 {
                tied = true;
            }
        }
        *best = if tied { None } else { top.1 };
    }
    let mut pairs = Vec::new();
    for i in 0..m {
        let row = &c.row(i)[..n];
        let mut top = (f64::NEG_INFINITY, None);
        let mut tied = false;
        for (j, &v) in row.iter().enumerate() {
            if v > top.0 {
                top = (v, Some(j));
                tied = false;
            } else if v == top.0 {
                tied = true;
            }
        }
        if let (false, Some(j)) = (tied, top.1) {
            if top.0 > t_m && col_best[j] == Some(i) {
                pairs.push(Correspondence { source: i, reference: j, score: top.0 });
            }
        }
    }
    CorrespondenceSet { pairs }
}

/// Default match threshold `t_m`.
pub const MATCH_THRESHOLD: f64 = 0.5;
/// Fewest matches for a registration to count as valid.
pub const MIN_MATCHES: usize = 3;
pub const SINKHORN_ITERATIONS: usize = 10;
