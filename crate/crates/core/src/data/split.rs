use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PointCloud;

/// Which side of the dataset's own train/test partition a model comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OfficialSplit {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledModel {
    pub category: String,
    pub name: String,
    pub split: OfficialSplit,
    pub cloud: PointCloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// All categories everywhere; 80:20 train/val from the training side.
    Official,
    /// Disjoint categories between training and testing.
    Unseen,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "official" => Ok(SplitMode::Official),
            "unseen" => Ok(SplitMode::Unseen),
            other => Err(Error::Config(format!("unknown split mode {other:?} (official|unseen)"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledModel>,
    pub val: Vec<LabeledModel>,
    pub test: Vec<LabeledModel>,
}

/// Partitions models into train/val/test.
///
/// Official: within each category the first `⌊0.8·n⌋` training-side models
/// (input order) train and the rest validate; the test side is the test set.
/// Unseen: categories are sorted by name; the first half trains on its
/// training-side models and validates on its test-side models, the second
/// half supplies the test set from its test-side models.
pub fn split_categories(models: &[LabeledModel], mode: SplitMode) -> Result<DatasetSplit> {
    let mut by_cat: BTreeMap<&str, Vec<&LabeledModel>> = BTreeMap::new();
    for m in models {
        by_cat.entry(m.category.as_str()).or_default().push(m);
    }
    let mut out = DatasetSplit::default();
    match mode {
        SplitMode::Official => {
            for items in by_cat.values() {
                let train_side: Vec<_> = items.iter().filter(|m| m.split == OfficialSplit::Train).collect();
                let cut = (train_side.len() as f64 * 0.8).floor() as usize;
                for (i, m) in train_side.into_iter().enumerate() {
                    if i < cut {
                        out.train.push((**m).clone());
                    } else {
                        out.val.push((**m).clone());
                    }
                }
            }
            out.test = models.iter().filter(|m| m.split == OfficialSplit::Test).cloned().collect();
        }
        SplitMode::Unseen => {
            if by_cat.len() < 2 {
                return Err(Error::Config(format!(
                    "unseen split needs at least 2 categories, found {}",
                    by_cat.len()
                )));
            }
            let half = by_cat.len() / 2;
            for (c, items) in by_cat.values().enumerate() {
                for m in items {
                    match (c < half, m.split) {
                        (true, OfficialSplit::Train) => out.train.push((*m).clone()),
                        (true, OfficialSplit::Test) => out.val.push((*m).clone()),
                        (false, OfficialSplit::Test) => out.test.push((*m).clone()),
                        (false, OfficialSplit::Train) => {}
                    }
                }
            }
        }
    }
    Ok(out)
}
