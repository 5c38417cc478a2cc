use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vsef;
use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodebookKind {
    Semantic,
    VisualStructured,
    VisualFlat,
}

/// Per-class target vectors: attribute vectors or visual signatures.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    kind: CodebookKind,
    entry_dims: Vec<usize>,
    entries: BTreeMap<usize, Vec<f64>>,
}

const STOCHASTIC_TOL: f64 = 1e-6;

impl Codebook {
    pub fn new(
        kind: CodebookKind,
        entry_dims: Vec<usize>,
        entries: BTreeMap<usize, Vec<f64>>,
    ) -> Result<Self> {
        let width: usize = entry_dims.iter().product();
        let dims_ok = match kind {
            CodebookKind::Semantic | CodebookKind::VisualFlat => entry_dims.len() == 1,
            CodebookKind::VisualStructured => entry_dims.len() == 2,
        };
        if !dims_ok || width == 0 {
            return Err(Error::InvalidInput(format!(
                "entry dims {entry_dims:?} invalid for {kind:?} codebook"
            )));
        }
        for (class, v) in &entries {
            if v.len() != width {
                return Err(Error::shape(
                    format!("{width} values for class {class}"),
                    v.len(),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("codebook entry {class}")));
            }
            match kind {
                CodebookKind::Semantic => {}
                CodebookKind::VisualFlat => check_stochastic(v, *class)?,
                CodebookKind::VisualStructured => {
                    for row in v.chunks(entry_dims[1]) {
                        check_stochastic(row, *class)?;
                    }
                }
            }
        }
        Ok(Codebook {
            kind,
            entry_dims,
            entries,
        })
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    pub fn entry_dims(&self) -> &[usize] {
        &self.entry_dims
    }

    pub fn width(&self) -> usize {
        self.entry_dims.iter().product()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.entries.get(&class).map(Vec::as_slice)
    }

    pub fn entries(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.entries
    }

    /// Sub-codebook over `classes`, failing with the full list of gaps.
    pub fn restrict(&self, classes: impl IntoIterator<Item = usize>) -> Result<Codebook> {
        let mut entries = BTreeMap::new();
        let mut missing = Vec::new();
        for c in classes {
            match self.entries.get(&c) {
                Some(v) => {
                    entries.insert(c, v.clone());
                }
                None => missing.push(c),
            }
        }
        if !missing.is_empty() {
            missing.sort_unstable();
            missing.dedup();
            return Err(Error::Coverage { missing });
        }
        Ok(Codebook {
            kind: self.kind,
            entry_dims: self.entry_dims.clone(),
            entries,
        })
    }

    /// Entries scaled to unit L2 norm (zero vectors are left alone).
    pub fn l2_normalized(&self) -> Vec<(usize, Vec<f64>)> {
        self.entries
            .iter()
            .map(|(c, v)| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let out = if n > 0.0 {
                    v.iter().map(|x| x / n).collect()
                } else {
                    v.clone()
                };
                (*c, out)
            })
            .collect()
    }

    /// Entries as `(class, vector)` pairs, optionally L2-normalized.
    pub fn scoring_entries(&self, normalize: bool) -> Vec<(usize, Vec<f64>)> {
        if normalize {
            self.l2_normalized()
        } else {
            self.entries.iter().map(|(c, v)| (*c, v.clone())).collect()
        }
    }

    /// Structured visual codebook collapsed to flat form (each entry divided by its row count).
    pub fn flattened(&self) -> Result<Codebook> {
        match self.kind {
            CodebookKind::VisualFlat => Ok(self.clone()),
            CodebookKind::VisualStructured => {
                let m = self.entry_dims[0] as f64;
                let entries = self
                    .entries
                    .iter()
                    .map(|(c, v)| (*c, v.iter().map(|x| x / m).collect()))
                    .collect();
                Codebook::new(CodebookKind::VisualFlat, vec![self.width()], entries)
            }
            CodebookKind::Semantic => Err(Error::InvalidInput(
                "cannot flatten a semantic codebook".into(),
            )),
        }
    }

    pub fn read_semantic_csv(path: impl AsRef<Path>) -> Result<Codebook> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Load(format!("{}: empty codebook", path.display())))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols[0] != "class_id" {
            return Err(Error::Load(format!(
                "{}: header must start with class_id and list at least one attribute",
                path.display()
            )));
        }
        let width = cols.len() - 1;
        let mut entries = BTreeMap::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != width + 1 {
                return Err(Error::Load(format!(
                    "{}:{}: expected {} fields, got {}",
                    path.display(),
                    lineno + 2,
                    width + 1,
                    fields.len()
                )));
            }
            let class: usize = fields[0].parse().map_err(|_| {
                Error::Load(format!("{}:{}: bad class id", path.display(), lineno + 2))
            })?;
            let v = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| {
                    Error::Load(format!(
                        "{}:{}: bad attribute value",
                        path.display(),
                        lineno + 2
                    ))
                })?;
            if entries.insert(class, v).is_some() {
                return Err(Error::Load(format!(
                    "{}: duplicate class {class}",
                    path.display()
                )));
            }
        }
        Codebook::new(CodebookKind::Semantic, vec![width], entries)
    }

    pub fn write_semantic_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("class_id");
        for i in 1..=self.width() {
            out.push_str(&format!(",a{i}"));
        }
        out.push('\n');
        for (c, v) in &self.entries {
            out.push_str(&c.to_string());
            for x in v {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Stacks entries in sorted class order: `n x M x K` or `n x (M*K)`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let mut dims = vec![self.entries.len()];
        dims.extend_from_slice(&self.entry_dims);
        let data = self.entries.values().flatten().copied().collect();
        Tensor::new(dims, data)
    }

    /// Visual codebook from a stacked tensor whose rows follow `classes` (sorted).
    pub fn from_visual_tensor(tensor: &Tensor, classes: &[usize]) -> Result<Codebook> {
        let dims = tensor.dims();
        let kind = match dims.len() {
            2 => CodebookKind::VisualFlat,
            3 => CodebookKind::VisualStructured,
            r => {
                return Err(Error::Load(format!(
                    "visual codebook must have rank 2 or 3, got {r}"
                )))
            }
        };
        if dims[0] != classes.len() {
            return Err(Error::Load(format!(
                "visual codebook has {} rows for {} classes",
                dims[0],
                classes.len()
            )));
        }
        let entry_dims = dims[1..].to_vec();
        let width: usize = entry_dims.iter().product();
        let entries = classes
            .iter()
            .zip(tensor.data().chunks(width))
            .map(|(c, v)| (*c, v.to_vec()))
            .collect();
        Codebook::new(kind, entry_dims, entries)
    }

    pub fn read_visual(path: impl AsRef<Path>, classes: &[usize]) -> Result<Codebook> {
        Codebook::from_visual_tensor(&vsef::read_tensor_file(path)?, classes)
    }

    /// Loads either format, picking by extension (`.csv` is semantic).
    pub fn read_any(path: impl AsRef<Path>, classes: &[usize]) -> Result<Codebook> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "csv") {
            Codebook::read_semantic_csv(path)
        } else {
            Codebook::read_visual(path, classes)
        }
    }
}

fn check_stochastic(v: &[f64], class: usize) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|x| *x < 0.0) || (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidInput(format!(
            "visual codebook entry for class {class} is not stochastic (sum {sum})"
        )));
    }
    Ok(())
}
