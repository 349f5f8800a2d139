//! Synthetic registration pairs with ground truth, following the clean,
//! noisy and partially-overlapping benchmark protocols, plus PLY and
//! dataset-directory I/O.

mod generate;
pub mod ply;
mod shapes;
mod split;
pub mod store;

pub use generate::{add_noise, crop_plane, establish_correspondences, make_pair, random_transform, sample_subset};
pub use shapes::{toy_model, toy_models};
pub use split::{split_categories, DatasetSplit, LabeledModel, OfficialSplit, SplitMode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{PointCloud, RigidTransform};

/// Which benchmark protocol a pair is generated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Identical point subsets, exact correspondences.
    Clean,
    /// Independent subsets with clipped Gaussian noise.
    Noise,
    /// As `Noise`, plus an independent planar crop of each cloud.
    Crop,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Regime::Clean),
            "noise" => Ok(Regime::Noise),
            "crop" => Ok(Regime::Crop),
            other => Err(Error::Config(format!("unknown regime {other:?} (clean|noise|crop)"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Clean => "clean",
            Regime::Noise => "noise",
            Regime::Crop => "crop",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub points_per_cloud: usize,
    pub rotation_max_deg: f64,
    pub translation_range: f64,
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub crop_fraction: f64,
    pub correspondence_max_dist: f64,
    /// Neighborhood size used when normals are re-estimated after noise.
    pub normal_k: usize,
    pub regime: Regime,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            points_per_cloud: 1024,
            rotation_max_deg: 80.0,
            translation_range: 0.5,
            noise_sigma: 0.01,
            noise_clip: 0.05,
            crop_fraction: 0.7,
            correspondence_max_dist: 0.05,
            normal_k: 10,
            regime: Regime::Clean,
            seed: 0,
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config(format!("crop_fraction {} not in (0, 1]", self.crop_fraction)));
        }
        if !(self.noise_clip >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma and clip must be nonnegative".into()));
        }
        if !(0.0..=180.0).contains(&self.rotation_max_deg) {
            return Err(Error::Config(format!("rotation_max_deg {} not in [0, 180]", self.rotation_max_deg)));
        }
        if !(self.translation_range >= 0.0) || !(self.correspondence_max_dist > 0.0) {
            return Err(Error::Config("translation range must be >= 0 and correspondence distance > 0".into()));
        }
        if self.points_per_cloud == 0 {
            return Err(Error::Config("points_per_cloud must be positive".into()));
        }
        Ok(())
    }

    /// Points left in each cloud after generation.
    pub fn output_size(&self) -> usize {
        match self.regime {
            Regime::Crop => crop_count(self.points_per_cloud, self.crop_fraction),
            _ => self.points_per_cloud,
        }
    }
}

/// `⌊fraction·m⌋`, at least one point.
pub fn crop_count(m: usize, fraction: f64) -> usize {
    ((fraction * m as f64).floor() as usize).clamp(1, m)
}

/// Ground-truth assignment between `m` source and `n` reference points,
/// stored sparsely. The dense form is `(m+1)×(n+1)` with a slack row and
/// column; the slack corner is 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthMatrix {
    m: usize,
    n: usize,
    /// `(source index, reference index)`, sorted by source index.
    matches: Vec<(usize, usize)>,
}

impl GroundTruthMatrix {
    pub fn new(m: usize, n: usize, mut matches: Vec<(usize, usize)>) -> Result<Self> {
        matches.sort_unstable();
        let mut seen_s = vec![false; m];
        let mut seen_r = vec![false; n];
        for &(i, j) in &matches {
            if i >= m || j >= n {
                return Err(Error::Size(format!("match ({i}, {j}) out of range for {m}×{n}")));
            }
            if std::mem::replace(&mut seen_s[i], true) || std::mem::replace(&mut seen_r[j], true) {
                return Err(Error::Config(format!("point matched twice in ({i}, {j})")));
            }
        }
        Ok(Self { m, n, matches })
    }

    pub fn source_len(&self) -> usize {
        self.m
    }

    pub fn reference_len(&self) -> usize {
        self.n
    }

    pub fn matches(&self) -> &[(usize, usize)] {
        &self.matches
    }

    pub fn num_matches(&self) -> usize {
        self.matches.len()
    }

    /// Dense `(m+1)×(n+1)` row-major 0/1 matrix.
    pub fn dense(&self) -> Vec<f64> {
        let cols = self.n + 1;
        let mut out = vec![0.0; (self.m + 1) * cols];
        let mut src_matched = vec![false; self.m];
        let mut ref_matched = vec![false; self.n];
        for &(i, j) in &self.matches {
            out[i * cols + j] = 1.0;
            src_matched[i] = true;
            ref_matched[j] = true;
        }
        for (i, &hit) in src_matched.iter().enumerate() {
            if !hit {
                out[i * cols + self.n] = 1.0;
            }
        }
        for (j, &hit) in ref_matched.iter().enumerate() {
            if !hit {
                out[self.m * cols + j] = 1.0;
            }
        }
        out
    }

    /// The same assignment after reindexing both sides.
    pub fn permuted(&self, source_perm: &[usize], reference_perm: &[usize]) -> Result<Self> {
        // new index k holds old point perm[k]; invert to map old -> new.
        let mut inv_s = vec![0; self.m];
        for (k, &old) in source_perm.iter().enumerate() {
            inv_s[old] = k;
        }
        let mut inv_r = vec![0; self.n];
        for (k, &old) in reference_perm.iter().enumerate() {
            inv_r[old] = k;
        }
        Self::new(self.m, self.n, self.matches.iter().map(|&(i, j)| (inv_s[i], inv_r[j])).collect())
    }
}

/// A source/reference pair with its ground-truth alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationExample {
    pub source: PointCloud,
    pub reference: PointCloud,
    /// Maps source coordinates into the reference frame.
    pub gt_transform: RigidTransform,
    pub gt_matrix: GroundTruthMatrix,
    pub label: String,
    pub seed: u64,
}
