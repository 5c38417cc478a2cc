use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::codebook::{Codebook, CodebookKind};
use super::vsef;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// What a stored instance holds.
#[derive(Clone, Debug, PartialEq)]
pub enum InstanceInput {
    /// `W x H x C` convolutional feature grid.
    FeatureMap(Tensor),
    /// `M x C` part features, bypassing attention.
    PartSet(Tensor),
}

impl InstanceInput {
    pub fn tensor(&self) -> &Tensor {
        match self {
            InstanceInput::FeatureMap(t) | InstanceInput::PartSet(t) => t,
        }
    }

    fn from_tensor(t: Tensor) -> Result<Self> {
        match t.rank() {
            3 => Ok(InstanceInput::FeatureMap(t)),
            2 => Ok(InstanceInput::PartSet(t)),
            r => Err(Error::Load(format!(
                "instance tensors must have rank 3 (feature map) or 2 (part set), got {r}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub class: usize,
    pub input: InstanceInput,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seen: BTreeSet<usize>,
    pub unseen: BTreeSet<usize>,
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitSpec {
    pub fn read(path: impl AsRef<Path>) -> Result<SplitSpec> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Validated collection of labelled instances with a codebook and a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    classes: Vec<usize>,
    codebook: Codebook,
    split: SplitSpec,
}

impl Dataset {
    /// Validates and sorts instances by id.
    pub fn new(mut instances: Vec<Instance>, codebook: Codebook, split: SplitSpec) -> Result<Self> {
        instances.sort_by(|a, b| a.id.cmp(&b.id));
        for w in instances.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Load(format!("duplicate instance id {}", w[0].id)));
            }
        }
        if let Some(c) = split.seen.intersection(&split.unseen).next() {
            return Err(Error::Load(format!("class {c} is both seen and unseen")));
        }
        let classes: Vec<usize> = split.seen.union(&split.unseen).copied().collect();
        if classes.iter().enumerate().any(|(i, c)| i != *c) {
            return Err(Error::Load(
                "class ids must be contiguous integers starting at 0".into(),
            ));
        }
        let class_set: BTreeSet<usize> = classes.iter().copied().collect();
        let mut by_id = BTreeMap::new();
        for inst in &instances {
            if !class_set.contains(&inst.class) {
                return Err(Error::Load(format!(
                    "instance {} has class {} outside the split",
                    inst.id, inst.class
                )));
            }
            by_id.insert(inst.id.as_str(), inst.class);
        }
        if let Some(first) = instances.first() {
            let dims = first.input.tensor().dims();
            let same_kind = |a: &InstanceInput| {
                std::mem::discriminant(a) == std::mem::discriminant(&first.input)
            };
            for inst in &instances {
                if !same_kind(&inst.input) || inst.input.tensor().dims() != dims {
                    return Err(Error::Load(format!(
                        "instance {} has dims {:?}, expected {:?}",
                        inst.id,
                        inst.input.tensor().dims(),
                        dims
                    )));
                }
            }
        }
        for id in &split.train {
            match by_id.get(id.as_str()) {
                None => return Err(Error::Load(format!("train instance {id} has no label"))),
                Some(c) if !split.seen.contains(c) => {
                    return Err(Error::Load(format!(
                        "train instance {id} belongs to unseen class {c}"
                    )))
                }
                _ => {}
            }
        }
        for id in &split.test {
            if !by_id.contains_key(id.as_str()) {
                return Err(Error::Load(format!("test instance {id} has no label")));
            }
            if split.train.contains(id) {
                return Err(Error::Load(format!(
                    "instance {id} is in both train and test"
                )));
            }
        }
        if let Err(Error::Coverage { missing }) = codebook.restrict(classes.iter().copied()) {
            return Err(Error::Load(format!("codebook lacks classes {missing:?}")));
        }
        Ok(Dataset {
            instances,
            classes,
            codebook,
            split,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn split(&self) -> &SplitSpec {
        &self.split
    }

    /// Same instances and codebook under another split.
    pub fn with_split(&self, split: SplitSpec) -> Result<Dataset> {
        Dataset::new(self.instances.clone(), self.codebook.clone(), split)
    }

    /// Same instances and split under another codebook.
    pub fn with_codebook(&self, codebook: Codebook) -> Result<Dataset> {
        Dataset::new(self.instances.clone(), codebook, self.split.clone())
    }

    pub fn train_instances(&self) -> Vec<&Instance> {
        self.instances
            .iter()
            .filter(|i| self.split.train.contains(&i.id))
            .collect()
    }

    pub fn test_instances(&self) -> Vec<&Instance> {
        self.instances
            .iter()
            .filter(|i| self.split.test.contains(&i.id))
            .collect()
    }

    /// Dims shared by every instance tensor.
    pub fn input_dims(&self) -> Option<&[usize]> {
        self.instances.first().map(|i| i.input.tensor().dims())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionCounts {
    pub classes: usize,
    pub seen: usize,
    pub unseen: usize,
    pub images: usize,
}

pub fn class_partition_counts(dataset: &Dataset) -> PartitionCounts {
    PartitionCounts {
        classes: dataset.classes.len(),
        seen: dataset.split.seen.len(),
        unseen: dataset.split.unseen.len(),
        images: dataset.instances.len(),
    }
}

pub const LABELS_FILE: &str = "labels.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const FEATURES_DIR: &str = "features";
pub const SEMANTIC_CODEBOOK_FILE: &str = "codebook_semantic.csv";
pub const VISUAL_CODEBOOK_FILE: &str = "codebook_visual.vsef";

fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("instance_id,class_id") => {}
        other => {
            return Err(Error::Load(format!(
                "{}: expected header instance_id,class_id, got {other:?}",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, class) = line.split_once(',').ok_or_else(|| {
            Error::Load(format!("{}:{}: expected two fields", path.display(), i + 2))
        })?;
        let class = class
            .trim()
            .parse()
            .map_err(|_| Error::Load(format!("{}:{}: bad class id", path.display(), i + 2)))?;
        out.push((id.trim().to_string(), class));
    }
    Ok(out)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let labels = read_labels(&dir.join(LABELS_FILE))?;
    let split = SplitSpec::read(dir.join(SPLIT_FILE))?;
    let classes: Vec<usize> = split.seen.union(&split.unseen).copied().collect();
    let semantic = dir.join(SEMANTIC_CODEBOOK_FILE);
    let visual = dir.join(VISUAL_CODEBOOK_FILE);
    let codebook = if semantic.exists() {
        Codebook::read_semantic_csv(&semantic)?
    } else if visual.exists() {
        Codebook::read_visual(&visual, &classes)?
    } else {
        return Err(Error::Load(format!(
            "{}: no {SEMANTIC_CODEBOOK_FILE} or {VISUAL_CODEBOOK_FILE}",
            dir.display()
        )));
    };
    let mut instances = Vec::with_capacity(labels.len());
    for (id, class) in labels {
        let path = dir.join(FEATURES_DIR).join(format!("{id}.vsef"));
        if !path.exists() {
            return Err(Error::Load(format!(
                "missing feature file {}",
                path.display()
            )));
        }
        let input = InstanceInput::from_tensor(vsef::read_tensor_file(&path)?)?;
        instances.push(Instance { id, class, input });
    }
    Dataset::new(instances, codebook, split)
}

/// Writes `dataset` in the directory layout read by [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let feats = dir.join(FEATURES_DIR);
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let mut labels = String::from("instance_id,class_id\n");
    for inst in &dataset.instances {
        labels.push_str(&format!("{},{}\n", inst.id, inst.class));
        vsef::write_tensor_file(inst.input.tensor(), feats.join(format!("{}.vsef", inst.id)))?;
    }
    let lp = dir.join(LABELS_FILE);
    fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))?;
    dataset.split.write(dir.join(SPLIT_FILE))?;
    match dataset.codebook.kind() {
        CodebookKind::Semantic => dataset
            .codebook
            .write_semantic_csv(dir.join(SEMANTIC_CODEBOOK_FILE)),
        _ => vsef::write_tensor_file(
            &dataset.codebook.to_tensor()?,
            dir.join(VISUAL_CODEBOOK_FILE),
        ),
    }
}
