//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<example>/source.ply
//! <root>/<example>/reference.ply
//! <root>/<example>/meta.json
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ply::{read_ply, write_ply, DEFAULT_NORMAL_K};
use super::{GroundTruthMatrix, Regime, RegistrationExample};
use crate::error::{Error, Result};
use crate::geom::RigidTransform;

/// JSON sidecar stored next to each example's clouds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    /// Row-major ground-truth rotation (source → reference).
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub matches: Vec<[usize; 2]>,
    pub label: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub label: String,
    pub seed: u64,
    pub source_points: usize,
    pub reference_points: usize,
    pub num_matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub regime: Regime,
    /// Effective configuration of the run that produced the dataset.
    pub config: serde_json::Value,
    pub examples: Vec<ManifestEntry>,
}

impl ManifestEntry {
    pub fn describe(dir: &str, ex: &RegistrationExample) -> Self {
        Self {
            dir: dir.to_string(),
            label: ex.label.clone(),
            seed: ex.seed,
            source_points: ex.source.len(),
            reference_points: ex.reference.len(),
            num_matches: ex.gt_matrix.num_matches(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_example(dir: impl AsRef<Path>, ex: &RegistrationExample) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ply(dir.join("source.ply"), &ex.source)?;
    write_ply(dir.join("reference.ply"), &ex.reference)?;
    let meta = ExampleMeta {
        rotation: ex.gt_transform.rotation_row_major(),
        translation: [ex.gt_transform.translation.x, ex.gt_transform.translation.y, ex.gt_transform.translation.z],
        matches: ex.gt_matrix.matches().iter().map(|&(i, j)| [i, j]).collect(),
        label: ex.label.clone(),
        seed: ex.seed,
    };
    write_json(&dir.join("meta.json"), &meta)
}

pub fn read_example(dir: impl AsRef<Path>) -> Result<RegistrationExample> {
    let dir = dir.as_ref();
    let meta: ExampleMeta = read_json(&dir.join("meta.json"))?;
    let source = read_ply(dir.join("source.ply"), DEFAULT_NORMAL_K)?;
    let reference = read_ply(dir.join("reference.ply"), DEFAULT_NORMAL_K)?;
    let gt_transform = RigidTransform::from_row_major(&meta.rotation, &meta.translation)?;
    let gt_matrix = GroundTruthMatrix::new(
        source.len(),
        reference.len(),
        meta.matches.iter().map(|&[i, j]| (i, j)).collect(),
    )?;
    Ok(RegistrationExample { source, reference, gt_transform, gt_matrix, label: meta.label, seed: meta.seed })
}

pub fn write_manifest(root: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let root = root.as_ref();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_json(&root.join("manifest.json"), manifest)
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Manifest> {
    read_json(&root.as_ref().join("manifest.json"))
}

/// Loads every example listed in the manifest, in manifest order.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<(Manifest, Vec<RegistrationExample>)> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    let examples = manifest
        .examples
        .iter()
        .map(|e| read_example(root.join(&e.dir)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, examples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_pair, toy_model, PairConfig};

    #[test]
    fn example_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let model = toy_model(2, 300).unwrap();
        for regime in [Regime::Clean, Regime::Crop] {
            let cfg = PairConfig { points_per_cloud: 100, regime, seed: 3, ..PairConfig::default() };
            let ex = make_pair(&model, "toy", &cfg).unwrap();
            let dir = tmp.path().join(regime.to_string());
            write_example(&dir, &ex).unwrap();
            assert_eq!(read_example(&dir).unwrap(), ex);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let model = toy_model(2, 300).unwrap();
        let mut entries = Vec::new();
        let mut examples = Vec::new();
        for i in 0..3u64 {
            let cfg = PairConfig { points_per_cloud: 64, seed: i, ..PairConfig::default() };
            let ex = make_pair(&model, "toy", &cfg).unwrap();
            let name = format!("{i:05}");
            write_example(tmp.path().join(&name), &ex).unwrap();
            entries.push(ManifestEntry::describe(&name, &ex));
            examples.push(ex);
        }
        let manifest = Manifest {
            tool_version: "test".into(),
            regime: Regime::Clean,
            config: serde_json::json!({"points": 64}),
            examples: entries,
        };
        write_manifest(tmp.path(), &manifest).unwrap();
        let (m, back) = load_dataset(tmp.path()).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(back, examples);
    }

    #[test]
    fn missing_meta_is_io_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(read_example(tmp.path()), Err(Error::Io { .. })));
    }
}
