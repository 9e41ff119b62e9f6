//! Unified label space, per-dataset subspace masks and the split-N
//! category protocol.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Ordered, deduplicated category names. A class id is an index into this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedLabelSpace {
    names: Vec<String>,
}

impl UnifiedLabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateCategory {
                    dataset: "<unified>".into(),
                    name: n.clone(),
                });
            }
        }
        if names.is_empty() {
            return Err(Error::Empty("label space"));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class_id: usize) -> &str {
        &self.names[class_id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Mask with the given class names set.
    pub fn mask_of(&self, dataset_id: usize, names: &[String]) -> Result<SubSpaceMask> {
        let mut bits = vec![false; self.len()];
        for n in names {
            let id = self
                .id_of(n)
                .ok_or_else(|| Error::Invalid(format!("unknown category `{n}`")))?;
            bits[id] = true;
        }
        SubSpaceMask::new(dataset_id, bits)
    }
}

/// Membership of each unified class in one dataset's annotated subspace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubSpaceMask {
    pub dataset_id: usize,
    bits: Vec<bool>,
}

impl SubSpaceMask {
    pub fn new(dataset_id: usize, bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::Invalid(format!(
                "subspace mask of dataset {dataset_id} has no members"
            )));
        }
        Ok(Self { dataset_id, bits })
    }

    pub fn full(dataset_id: usize, len: usize) -> Self {
        Self {
            dataset_id,
            bits: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn contains(&self, class_id: usize) -> bool {
        self.bits.get(class_id).copied().unwrap_or(false)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Class ids inside the subspace, ascending.
    pub fn members(&self) -> Vec<usize> {
        self.side_members(Side::Inside)
    }

    /// Class ids of the complement, ascending.
    pub fn complement_members(&self) -> Vec<usize> {
        self.side_members(Side::Complement)
    }

    pub fn side_members(&self, side: Side) -> Vec<usize> {
        (0..self.bits.len())
            .filter(|&c| self.bits[c] == (side == Side::Inside))
            .collect()
    }

    /// Mask as a string of `0`/`1` characters, one per unified class.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(dataset_id: usize, s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Invalid(format!("bad mask character `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dataset_id, bits)
    }
}

/// Which side of a subspace mask to select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Inside,
    Complement,
}

/// Merge per-dataset category lists into one label space by exact name.
///
/// Class ids follow first appearance in dataset order.
pub fn build_unified(
    specs: &[(String, Vec<String>)],
) -> Result<(UnifiedLabelSpace, Vec<SubSpaceMask>)> {
    if specs.is_empty() {
        return Err(Error::Empty("dataset list"));
    }
    let mut names: Vec<String> = Vec::new();
    for (dataset, cats) in specs {
        if cats.is_empty() {
            return Err(Error::Invalid(format!("dataset `{dataset}` has no categories")));
        }
        let mut local = HashSet::new();
        for c in cats {
            if !local.insert(c.as_str()) {
                return Err(Error::DuplicateCategory {
                    dataset: dataset.clone(),
                    name: c.clone(),
                });
            }
            if !names.contains(c) {
                names.push(c.clone());
            }
        }
    }
    let space = UnifiedLabelSpace::new(names)?;
    let masks = specs
        .iter()
        .enumerate()
        .map(|(i, (_, cats))| space.mask_of(i, cats))
        .collect::<Result<Vec<_>>>()?;
    Ok((space, masks))
}

/// Select the `(class_id, score)` pairs on one side of a mask.
pub fn project_scores(
    scores: &[f64],
    mask: &SubSpaceMask,
    side: Side,
) -> Result<Vec<(usize, f64)>> {
    if scores.len() != mask.len() {
        return Err(Error::LengthMismatch {
            expected: mask.len(),
            actual: scores.len(),
        });
    }
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(c, _)| mask.contains(c) == (side == Side::Inside))
        .map(|(c, &s)| (c, s))
        .collect())
}

/// Category partition for an N-dataset split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub num_categories: usize,
    /// The N+1 disjoint groups before merging; the last one is shared.
    pub groups: Vec<Vec<usize>>,
    /// Final per-dataset subspaces: group i merged with the shared group.
    pub subspaces: Vec<Vec<usize>>,
}

impl SplitPlan {
    pub fn dataset_count(&self) -> usize {
        self.subspaces.len()
    }

    pub fn shared_group(&self) -> &[usize] {
        self.groups.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn masks(&self) -> Vec<SubSpaceMask> {
        self.subspaces
            .iter()
            .enumerate()
            .map(|(i, members)| {
                let mut bits = vec![false; self.num_categories];
                for &c in members {
                    bits[c] = true;
                }
                SubSpaceMask { dataset_id: i, bits }
            })
            .collect()
    }
}

/// Randomly partition `k` categories into `n + 1` groups and merge the last
/// group into each of the first `n`.
///
/// Group sizes differ by at most one, larger groups first.
pub fn split_protocol(k: usize, n: usize, rng: &mut SplitMix64) -> Result<SplitPlan> {
    if n == 0 {
        return Err(Error::Config("dataset count must be positive".into()));
    }
    if k < n + 1 {
        return Err(Error::Config(format!(
            "{k} categories cannot be split into {} non-empty groups",
            n + 1
        )));
    }
    let mut ids: Vec<usize> = (0..k).collect();
    ids.shuffle(rng);
    let parts = n + 1;
    let base = k / parts;
    let extra = k % parts;
    let mut groups = Vec::with_capacity(parts);
    let mut at = 0;
    for g in 0..parts {
        let size = base + usize::from(g < extra);
        let mut group = ids[at..at + size].to_vec();
        group.sort_unstable();
        groups.push(group);
        at += size;
    }
    let shared = groups[n].clone();
    let subspaces = groups[..n]
        .iter()
        .map(|g| {
            let mut s: Vec<usize> = g.iter().chain(shared.iter()).copied().collect();
            s.sort_unstable();
            s
        })
        .collect();
    Ok(SplitPlan {
        num_categories: k,
        groups,
        subspaces,
    })
}
