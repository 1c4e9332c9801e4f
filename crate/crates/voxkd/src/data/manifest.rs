//! Dataset manifests: a synthetic dataset is a directory of seeded scene
//! descriptor files. Scenes materialize on demand from their seed, so a
//! manifest of a few kilobytes stands in for gigabytes of scans.
//!
//! Layout:
//!
//! ```text
//! dataset/
//!   dataset.json          — class count and counts per split
//!   train/<scene>.json    — one SceneDescriptor per scene
//!   val/<scene>.json
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{synth_scene, DataError, PointCloud, SceneParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?} (expected train or val)")),
        }
    }
}

/// Everything needed to regenerate one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub name: String,
    pub seed: u64,
    pub params: SceneParams,
}

impl SceneDescriptor {
    /// Materializes the scene's point cloud.
    pub fn realize(&self) -> Result<PointCloud, DataError> {
        synth_scene(self.seed, &self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub train: Vec<SceneDescriptor>,
    pub val: Vec<SceneDescriptor>,
}

impl DatasetManifest {
    pub fn scenes(&self, split: Split) -> &[SceneDescriptor] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Summary written to `dataset.json`.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetIndex {
    num_classes: usize,
    train_scenes: usize,
    val_scenes: usize,
}

fn manifest_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Manifest {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Writes the manifest as a directory tree of descriptor files.
pub fn write_dataset(dir: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<(), DataError> {
    let dir = dir.as_ref();
    for (split, scenes) in [(Split::Train, &manifest.train), (Split::Val, &manifest.val)] {
        let split_dir = dir.join(split.as_str());
        std::fs::create_dir_all(&split_dir)?;
        for scene in scenes {
            if scene.params.classes != manifest.num_classes {
                return Err(manifest_err(
                    &split_dir.join(&scene.name),
                    format!(
                        "scene has {} classes but the dataset declares {}",
                        scene.params.classes, manifest.num_classes
                    ),
                ));
            }
            let path = split_dir.join(format!("{}.json", scene.name));
            let json = serde_json::to_string_pretty(scene)
                .map_err(|e| manifest_err(&path, e.to_string()))?;
            std::fs::write(&path, json)?;
        }
    }
    let index = DatasetIndex {
        num_classes: manifest.num_classes,
        train_scenes: manifest.train.len(),
        val_scenes: manifest.val.len(),
    };
    let path = dir.join("dataset.json");
    let json =
        serde_json::to_string_pretty(&index).map_err(|e| manifest_err(&path, e.to_string()))?;
    std::fs::write(&path, json)?;
    Ok(())
}

/// Loads a manifest directory. Scene files are read in sorted filename
/// order so the result is independent of directory enumeration order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetManifest, DataError> {
    let dir = dir.as_ref();
    let index_path = dir.join("dataset.json");
    let index_text = std::fs::read_to_string(&index_path)
        .map_err(|e| manifest_err(&index_path, format!("cannot read dataset index: {e}")))?;
    let index: DatasetIndex = serde_json::from_str(&index_text)
        .map_err(|e| manifest_err(&index_path, e.to_string()))?;

    let mut manifest = DatasetManifest {
        num_classes: index.num_classes,
        train: Vec::new(),
        val: Vec::new(),
    };
    for split in [Split::Train, Split::Val] {
        let split_dir = dir.join(split.as_str());
        let mut paths: Vec<_> = match std::fs::read_dir(&split_dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json"))
                .collect(),
            Err(e) => return Err(manifest_err(&split_dir, format!("cannot list split: {e}"))),
        };
        paths.sort();
        for path in paths {
            let text = std::fs::read_to_string(&path)?;
            let scene: SceneDescriptor = serde_json::from_str(&text)
                .map_err(|e| manifest_err(&path, e.to_string()))?;
            if scene.params.classes != index.num_classes {
                return Err(manifest_err(
                    &path,
                    format!(
                        "scene has {} classes but the dataset declares {}",
                        scene.params.classes, index.num_classes
                    ),
                ));
            }
            match split {
                Split::Train => manifest.train.push(scene),
                Split::Val => manifest.val.push(scene),
            }
        }
    }
    let (expect_train, expect_val) = (index.train_scenes, index.val_scenes);
    if manifest.train.len() != expect_train || manifest.val.len() != expect_val {
        return Err(manifest_err(
            dir,
            format!(
                "index declares {expect_train} train / {expect_val} val scenes, found {} / {}",
                manifest.train.len(),
                manifest.val.len()
            ),
        ));
    }
    Ok(manifest)
}

/// Builds a manifest of `train + val` procedurally seeded scenes.
pub fn seeded_manifest(
    base_seed: u64,
    params: &SceneParams,
    train: usize,
    val: usize,
) -> DatasetManifest {
    let descriptor = |split: &str, i: usize, seed: u64| SceneDescriptor {
        name: format!("{split}_{i:04}"),
        seed,
        params: *params,
    };
    DatasetManifest {
        num_classes: params.classes,
        train: (0..train)
            .map(|i| descriptor("scene", i, base_seed.wrapping_add(i as u64)))
            .collect(),
        val: (0..val)
            .map(|i| descriptor("scene_val", i, base_seed.wrapping_add((train + i) as u64)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_manifest() -> DatasetManifest {
        seeded_manifest(
            100,
            &SceneParams {
                classes: 4,
                points_per_class: 64,
                ..Default::default()
            },
            3,
            2,
        )
    }

    #[test]
    fn round_trips_through_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = sample_manifest();
        write_dataset(dir.path(), &manifest).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, manifest);

        // Scene files are individually readable JSON.
        let one = dir.path().join("train").join("scene_0000.json");
        let text = std::fs::read_to_string(one).unwrap();
        assert!(text.contains("\"seed\""));
    }

    #[test]
    fn descriptors_realize_deterministically() {
        let manifest = sample_manifest();
        let a = manifest.train[0].realize().unwrap();
        let b = manifest.train[0].realize().unwrap();
        assert_eq!(a, b);
        // Distinct seeds make distinct scenes.
        let c = manifest.train[1].realize().unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn missing_directory_is_a_readable_error() {
        let err = load_dataset("/nonexistent/dataset").unwrap_err();
        assert!(err.to_string().contains("dataset.json"), "{err}");
    }

    #[test]
    fn corrupt_scene_file_is_rejected_with_its_path() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &sample_manifest()).unwrap();
        let victim = dir.path().join("val").join("scene_val_0000.json");
        std::fs::write(&victim, "{ not json").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("scene_val_0000"), "{err}");
    }

    #[test]
    fn scene_count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &sample_manifest()).unwrap();
        std::fs::remove_file(dir.path().join("train").join("scene_0001.json")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("declares 3"), "{err}");
    }

    #[test]
    fn class_count_disagreement_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = sample_manifest();
        manifest.num_classes = 7;
        assert!(write_dataset(dir.path(), &manifest).is_err());
    }
}
