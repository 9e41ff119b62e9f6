//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<dataset>/annotations.json
//! <dir>/<dataset>/images/<scene-id>.rgb   raw H*W*3 bytes, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, DataConfig, DatasetBundle, Role, Scene, SceneDataset};
use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::image::Image;
use crate::labelspace::{SplitPlan, SubSpaceMask, UnifiedLabelSpace};
use crate::util::{read_json, write_atomic, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;
const IMAGE_ENCODING: &str =
    "raw rgb8: row-major H x W x 3 bytes, channel value v stored as round(255 * v)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub image_size: [usize; 3],
    pub image_encoding: String,
    pub label_space: Vec<String>,
    pub datasets: Vec<ManifestDataset>,
    pub seeds: ManifestSeeds,
    pub split_groups: Option<Vec<Vec<usize>>>,
    pub config: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestDataset {
    pub name: String,
    pub dataset_id: usize,
    pub role: Role,
    pub categories: Vec<String>,
    pub mask: String,
    pub scene_count: usize,
    pub annotations: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSeeds {
    pub generation: u64,
    pub scene_seed_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationFile {
    dataset: String,
    images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImageEntry {
    file: String,
    scene_id: usize,
    annotations: Vec<BoxEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BoxEntry {
    class: String,
    bbox: BoxXYXY,
}

fn all_datasets(bundle: &DatasetBundle) -> Vec<&SceneDataset> {
    bundle
        .train
        .iter()
        .chain([&bundle.val, &bundle.calib])
        .collect()
}

/// SHA-256 over the label space, every dataset's mask and every scene's
/// quantized pixels and annotations. Equal for a bundle and its on-disk copy.
pub fn bundle_fingerprint(bundle: &DatasetBundle) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for n in bundle.label_space.names() {
        h.update(n.as_bytes());
        h.update([0]);
    }
    for ds in all_datasets(bundle) {
        h.update(ds.name.as_bytes());
        h.update(ds.mask.to_bit_string().as_bytes());
        h.update((ds.len() as u64).to_le_bytes());
        for s in &ds.scenes {
            h.update((s.id as u64).to_le_bytes());
            h.update(s.image.to_rgb8());
            h.update((s.annotations.len() as u64).to_le_bytes());
            for a in &s.annotations {
                h.update((a.class_id as u64).to_le_bytes());
                for v in a.bbox.to_array() {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Write a bundle to `dir` (created if missing).
pub fn write_dataset_dir(dir: &Path, bundle: &DatasetBundle) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let space = &bundle.label_space;
    let size = bundle.image_size();
    let mut entries = Vec::new();
    for ds in all_datasets(bundle) {
        let ds_dir = dir.join(&ds.name);
        let img_dir = ds_dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut images = Vec::with_capacity(ds.len());
        for s in &ds.scenes {
            let file = format!("images/{:05}.rgb", s.id);
            write_atomic(&ds_dir.join(&file), &s.image.to_rgb8())?;
            images.push(ImageEntry {
                file,
                scene_id: s.id,
                annotations: s
                    .annotations
                    .iter()
                    .map(|a| BoxEntry {
                        class: space.name(a.class_id).to_string(),
                        bbox: a.bbox,
                    })
                    .collect(),
            });
        }
        let ann_path = format!("{}/annotations.json", ds.name);
        write_json(
            &dir.join(&ann_path),
            &AnnotationFile {
                dataset: ds.name.clone(),
                images,
            },
        )?;
        entries.push(ManifestDataset {
            name: ds.name.clone(),
            dataset_id: ds.dataset_id,
            role: ds.role,
            categories: ds
                .mask
                .members()
                .into_iter()
                .map(|c| space.name(c).to_string())
                .collect(),
            mask: ds.mask.to_bit_string(),
            scene_count: ds.len(),
            annotations: ann_path,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        image_size: [size, size, 3],
        image_encoding: IMAGE_ENCODING.into(),
        label_space: space.names().to_vec(),
        datasets: entries,
        seeds: ManifestSeeds {
            generation: bundle.config.gen.seed,
            scene_seed_rule: "scene i uses splitmix64(derive_seed(generation, [1, i]))".into(),
        },
        split_groups: bundle.plan.as_ref().map(|p| p.groups.clone()),
        config: bundle.config.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Read a dataset directory written by [`write_dataset_dir`].
pub fn read_dataset_dir(dir: &Path) -> Result<DatasetBundle> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Invalid(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let space = UnifiedLabelSpace::new(manifest.label_space.clone())?;
    let [h, w, c] = manifest.image_size;
    let mut train = Vec::new();
    let mut val = None;
    let mut calib = None;
    for entry in &manifest.datasets {
        let ann: AnnotationFile = read_json(&dir.join(&entry.annotations))?;
        let ds_dir = dir.join(&entry.name);
        let mut scenes = Vec::with_capacity(ann.images.len());
        for img in ann.images {
            let path = ds_dir.join(&img.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let image = Image::from_rgb8(h, w, c, &bytes)?;
            let annotations = img
                .annotations
                .iter()
                .map(|b| {
                    space
                        .id_of(&b.class)
                        .map(|class_id| Annotation {
                            class_id,
                            bbox: b.bbox,
                        })
                        .ok_or_else(|| Error::Invalid(format!("unknown class `{}`", b.class)))
                })
                .collect::<Result<Vec<_>>>()?;
            scenes.push(Scene {
                id: img.scene_id,
                image,
                annotations,
            });
        }
        let ds = SceneDataset {
            dataset_id: entry.dataset_id,
            name: entry.name.clone(),
            role: entry.role,
            mask: SubSpaceMask::from_bit_string(entry.dataset_id, &entry.mask)?,
            scenes,
        };
        match entry.role {
            Role::Train => train.push(ds),
            Role::Val => val = Some(ds),
            Role::Calib => calib = Some(ds),
        }
    }
    let plan = manifest.split_groups.as_ref().map(|groups| {
        let n = groups.len() - 1;
        let shared = &groups[n];
        SplitPlan {
            num_categories: space.len(),
            groups: groups.clone(),
            subspaces: groups[..n]
                .iter()
                .map(|g| {
                    let mut s: Vec<usize> = g.iter().chain(shared).copied().collect();
                    s.sort_unstable();
                    s
                })
                .collect(),
        }
    });
    Ok(DatasetBundle {
        label_space: space,
        train,
        val: val.ok_or(Error::Empty("validation dataset"))?,
        calib: calib.ok_or(Error::Empty("calibration dataset"))?,
        plan,
        config: manifest.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_bundle, GenConfig};

    #[test]
    fn directory_round_trip() {
        let cfg = DataConfig {
            gen: GenConfig {
                scene_count: 24,
                seed: 3,
                ..GenConfig::default()
            },
            ..DataConfig::default()
        };
        let bundle = build_bundle(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(dir.path(), &bundle).unwrap();
        let back = read_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.label_space, bundle.label_space);
        assert_eq!(back.train, bundle.train);
        assert_eq!(back.val, bundle.val);
        assert_eq!(back.calib, bundle.calib);
        assert_eq!(back.plan, bundle.plan);
    }
}
