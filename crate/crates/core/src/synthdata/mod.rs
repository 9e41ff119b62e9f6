//! Synthetic multi-dataset detection scenes.
//!
//! Scenes are drawn from a fixed 12-category taxonomy with nested parts so
//! that ground-truth boxes of different classes overlap by construction. A
//! fully labeled pool is then cut into N training subsets whose annotations
//! are restricted to their category subspaces, plus full-label validation
//! and calibration sets.

mod augment;
mod io;
mod render;

pub use augment::{augment, draw_record, AugMode, AugmentationRecord, StrongAugConfig};
pub use io::{bundle_fingerprint, read_dataset_dir, write_dataset_dir, Manifest, ManifestDataset, MANIFEST_FILE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY};
use crate::image::Image;
use crate::labelspace::{split_protocol, SplitPlan, SubSpaceMask, UnifiedLabelSpace};
use crate::rng::{tag, SplitMix64};
use render::{build_object, draw_children, draw_size, paint, Object, TOP_LEVEL};

/// Category names in class-id order.
pub const TAXONOMY: [&str; 12] = [
    "agent",
    "agent-head",
    "agent-face",
    "cart",
    "cart-wheel",
    "crate",
    "crate-lid",
    "disc",
    "ring",
    "bar",
    "blob",
    "tri",
];

/// `(child, parent)` class pairs of the taxonomy.
pub const NESTED_PAIRS: [(usize, usize); 5] = [
    (render::AGENT_HEAD, render::AGENT),
    (render::AGENT_FACE, render::AGENT_HEAD),
    (render::CART_WHEEL, render::CART),
    (render::CRATE_LID, render::CRATE),
    (render::RING, render::DISC),
];

pub fn taxonomy_space() -> UnifiedLabelSpace {
    UnifiedLabelSpace::new(TAXONOMY.iter().map(|s| s.to_string()).collect())
        .expect("taxonomy names are unique")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub image_size: usize,
    pub scene_count: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub nesting_probability: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            scene_count: 400,
            objects_min: 2,
            objects_max: 6,
            nesting_probability: 0.7,
            noise_amplitude: 0.05,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be at least 32".into()));
        }
        if self.scene_count == 0 || self.objects_min == 0 || self.objects_max < self.objects_min {
            return Err(Error::Config("scene and object counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nesting_probability) {
            return Err(Error::Config("nesting_probability must lie in [0, 1]".into()));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return Err(Error::Config("noise_amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BoxXYXY,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BoxXYXY> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    Calib,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub dataset_id: usize,
    pub name: String,
    pub role: Role,
    pub mask: SubSpaceMask,
    pub scenes: Vec<Scene>,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Drop annotations outside the dataset's subspace.
    pub fn restrict_to_mask(&mut self) {
        let mask = self.mask.clone();
        for s in &mut self.scenes {
            s.annotations.retain(|a| mask.contains(a.class_id));
        }
    }
}

fn draw_scene(config: &GenConfig, id: usize) -> Scene {
    let mut rng = SplitMix64::derived(config.seed, &[tag::SCENE, id as u64]);
    let size = config.image_size as f64;

    let target = config.objects_min
        + (rng.next() % (config.objects_max - config.objects_min + 1) as u64) as usize;
    let mut objects: Vec<Object> = Vec::new();
    let mut count = 0;
    let mut attempts = 0;
    while count < target && attempts < 100 {
        attempts += 1;
        let kind = TOP_LEVEL[(rng.next() % TOP_LEVEL.len() as u64) as usize];
        let (w, h) = draw_size(kind, &mut rng);
        let children = draw_children(kind, config.nesting_probability, &mut rng);
        if count + 1 + children > target || w > size || h > size {
            continue;
        }
        let x = rng.uniform(0.0, size - w).floor();
        let y = rng.uniform(0.0, size - h).floor();
        let outer = BoxXYXY::new(x, y, x + w, y + h).expect("positive size");
        if objects.iter().any(|o| iou(&o.outer(), &outer) > 0.0) {
            continue;
        }
        count += 1 + children;
        objects.push(build_object(kind, outer, children));
    }

    let n = config.image_size;
    let mut image = Image::filled(n, n, 3, 0.0);
    let base = [
        rng.uniform(0.35, 0.55),
        rng.uniform(0.35, 0.55),
        rng.uniform(0.35, 0.55),
    ];
    let tilt = rng.uniform(-0.1, 0.1);
    for y in 0..n {
        for x in 0..n {
            let g = tilt * ((x + y) as f64 / (2 * n) as f64 - 0.5);
            let px = image.pixel_mut(y, x);
            for c in 0..3 {
                px[c] = base[c] + g;
            }
        }
    }
    let mut annotations = Vec::with_capacity(count);
    for o in &objects {
        for p in &o.parts {
            paint(&mut image, p);
            annotations.push(Annotation {
                class_id: p.class_id,
                bbox: p.bbox,
            });
        }
    }
    let amp = config.noise_amplitude;
    if amp > 0.0 {
        for v in &mut image.data {
            *v = (*v + rng.uniform(-amp, amp)).clamp(0.0, 1.0);
        }
    }
    image.quantize();
    Scene {
        id,
        image,
        annotations,
    }
}

/// Generate a fully labeled pool of scenes. Each scene uses its own seed
/// derived from `config.seed` and its index.
pub fn generate_dataset(config: &GenConfig) -> Result<SceneDataset> {
    config.validate()?;
    let scenes = (0..config.scene_count)
        .map(|i| draw_scene(config, i))
        .collect();
    Ok(SceneDataset {
        dataset_id: 0,
        name: "pool".into(),
        role: Role::Train,
        mask: SubSpaceMask::full(0, TAXONOMY.len()),
        scenes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub calib_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            calib_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitDatasets {
    pub train: Vec<SceneDataset>,
    pub val: SceneDataset,
    pub calib: SceneDataset,
}

/// Partition a fully labeled pool into N masked training subsets plus
/// full-label validation and calibration sets.
pub fn apply_split(
    pool: &SceneDataset,
    plan: &SplitPlan,
    config: &SplitConfig,
    rng: &mut SplitMix64,
) -> Result<SplitDatasets> {
    use rand::seq::SliceRandom;

    let n = plan.dataset_count();
    if pool.len() < n + 2 {
        return Err(Error::Invalid(format!(
            "{} scenes cannot be split into {n} training sets plus val and calib",
            pool.len()
        )));
    }
    if plan.num_categories != pool.mask.len() {
        return Err(Error::Invalid(
            "split plan and dataset use different label spaces".into(),
        ));
    }
    let total = pool.len();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);

    let n_val = ((total as f64 * config.val_fraction).round() as usize).clamp(1, total - n - 1);
    let n_calib =
        ((total as f64 * config.calib_fraction).round() as usize).clamp(1, total - n - n_val);
    let (val_idx, rest) = order.split_at(n_val);
    let (calib_idx, train_idx) = rest.split_at(n_calib);

    let pick = |idx: &[usize]| -> Vec<Scene> {
        let mut v: Vec<Scene> = idx.iter().map(|&i| pool.scenes[i].clone()).collect();
        v.sort_by_key(|s| s.id);
        v
    };
    let k = plan.num_categories;
    let val = SceneDataset {
        dataset_id: n,
        name: "val".into(),
        role: Role::Val,
        mask: SubSpaceMask::full(n, k),
        scenes: pick(val_idx),
    };
    let calib = SceneDataset {
        dataset_id: n + 1,
        name: "calib".into(),
        role: Role::Calib,
        mask: SubSpaceMask::full(n + 1, k),
        scenes: pick(calib_idx),
    };

    let masks = plan.masks();
    let m = train_idx.len();
    let mut train = Vec::with_capacity(n);
    let mut at = 0;
    for (i, mask) in masks.into_iter().enumerate() {
        let size = m / n + usize::from(i < m % n);
        let mut ds = SceneDataset {
            dataset_id: i,
            name: format!("train_{i}"),
            role: Role::Train,
            mask,
            scenes: pick(&train_idx[at..at + size]),
        };
        ds.restrict_to_mask();
        train.push(ds);
        at += size;
    }
    Ok(SplitDatasets { train, val, calib })
}

/// Everything `gen` produces: label space, training subsets, val and calib.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub label_space: UnifiedLabelSpace,
    pub train: Vec<SceneDataset>,
    pub val: SceneDataset,
    pub calib: SceneDataset,
    pub plan: Option<SplitPlan>,
    pub config: DataConfig,
}

impl DatasetBundle {
    pub fn image_size(&self) -> usize {
        self.config.gen.image_size
    }
}

/// Dataset generation recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub gen: GenConfig,
    /// Number of masked training subsets.
    pub datasets: usize,
    pub split: SplitConfig,
    /// Keep every annotation and merge the training subsets into one dataset.
    pub full_labels: bool,
    /// Restrict the label space to these categories (taxonomy order kept).
    pub categories: Option<Vec<String>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            datasets: 3,
            split: SplitConfig::default(),
            full_labels: false,
            categories: None,
        }
    }
}

/// Generate scenes and apply the split protocol described by `config`.
///
/// Scene content and the scene partition depend only on the generation seed,
/// so bundles built with different `full_labels`/`categories` settings share
/// identical images.
pub fn build_bundle(config: &DataConfig) -> Result<DatasetBundle> {
    config.gen.validate()?;
    if config.datasets == 0 {
        return Err(Error::Config("datasets must be positive".into()));
    }
    let mut pool = generate_dataset(&config.gen)?;

    let full = taxonomy_space();
    let (space, remap): (UnifiedLabelSpace, Vec<Option<usize>>) = match &config.categories {
        None => (full.clone(), (0..full.len()).map(Some).collect()),
        Some(names) => {
            for n in names {
                if full.id_of(n).is_none() {
                    return Err(Error::Config(format!("unknown category `{n}`")));
                }
            }
            let kept: Vec<String> = TAXONOMY
                .iter()
                .filter(|t| names.iter().any(|n| n == *t))
                .map(|s| s.to_string())
                .collect();
            let space = UnifiedLabelSpace::new(kept)
                .map_err(|e| Error::Config(format!("categories: {e}")))?;
            let remap = TAXONOMY.iter().map(|t| space.id_of(t)).collect();
            (space, remap)
        }
    };
    let k = space.len();
    for s in &mut pool.scenes {
        s.annotations = s
            .annotations
            .iter()
            .filter_map(|a| {
                remap[a.class_id].map(|c| Annotation {
                    class_id: c,
                    bbox: a.bbox,
                })
            })
            .collect();
    }
    pool.mask = SubSpaceMask::full(0, k);

    let n = config.datasets;
    let plan = if config.full_labels {
        // every subset keeps every class; only the scene partition matters
        let all: Vec<usize> = (0..k).collect();
        let mut groups = vec![Vec::new(); n];
        groups.push(all.clone());
        SplitPlan {
            num_categories: k,
            groups,
            subspaces: vec![all; n],
        }
    } else {
        let mut cat_rng = SplitMix64::derived(config.gen.seed, &[tag::CATEGORY_SPLIT]);
        split_protocol(k, n, &mut cat_rng).map_err(|e| Error::Config(format!("split: {e}")))?
    };
    let mut split_rng = SplitMix64::derived(config.gen.seed, &[tag::SPLIT]);
    let parts = apply_split(&pool, &plan, &config.split, &mut split_rng)?;

    if config.full_labels {
        let mut scenes: Vec<Scene> = Vec::new();
        for ds in &parts.train {
            for s in &ds.scenes {
                scenes.push(pool.scenes[s.id].clone());
            }
        }
        scenes.sort_by_key(|s| s.id);
        let train = SceneDataset {
            dataset_id: 0,
            name: "train_full".into(),
            role: Role::Train,
            mask: SubSpaceMask::full(0, k),
            scenes,
        };
        let mut val = parts.val;
        let mut calib = parts.calib;
        val.dataset_id = 1;
        val.mask.dataset_id = 1;
        calib.dataset_id = 2;
        calib.mask.dataset_id = 2;
        return Ok(DatasetBundle {
            label_space: space,
            train: vec![train],
            val,
            calib,
            plan: None,
            config: config.clone(),
        });
    }

    Ok(DatasetBundle {
        label_space: space,
        train: parts.train,
        val: parts.val,
        calib: parts.calib,
        plan: Some(plan),
        config: config.clone(),
    })
}
