//! Planted-prototype synthetic datasets.
//!
//! Every class owns a "dominant" part-type per part (its code). Instances of
//! a class take the dominant type on most parts and an off type on the rest,
//! with per-class quotas so that the empirical type frequencies equal the
//! class distribution `q_y(k|m)` exactly. Part features are drawn around the
//! planted prototypes; feature maps place each part's signal in its own
//! spatial region and channel block.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::codebook::{Codebook, CodebookKind};
use super::dataset::{Dataset, Instance, InstanceInput, SplitSpec};
use crate::numerics::{sq_dist, Tensor};
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    FeatureMap,
    PartSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub parts: usize,
    pub types: usize,
    pub n_classes: usize,
    pub n_seen: usize,
    pub per_class: usize,
    /// Minimum distance between prototypes of the same part.
    pub separation: f64,
    /// Standard deviation of part features around their prototype.
    pub noise: f64,
    pub seed: u64,
    /// Fraction of a class's instances showing the dominant type, per part.
    pub type_purity: f64,
    /// Fraction of seen-class instances put in the train split.
    pub train_fraction: f64,
    /// Half-width of uniform noise added to the visual attribute dims.
    pub attr_noise: f64,
    /// Fraction of semantic dims that carry random, non-visual values.
    pub semantic_padding: f64,
    pub emit: InputKind,
    /// Channel-block marker added at a part's region.
    pub marker_strength: f64,
    /// Constant level of every cell and channel.
    pub baseline: f64,
    /// Per-cell Gaussian noise.
    pub cell_noise: f64,
    /// Spatial spread (cells) of a part's blob.
    pub blob_width: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            channels: 32,
            width: 7,
            height: 7,
            parts: 4,
            types: 8,
            n_classes: 14,
            n_seen: 10,
            per_class: 30,
            separation: 10.0,
            noise: 1.0,
            seed: 0,
            type_purity: 0.9,
            train_fraction: 0.8,
            attr_noise: 0.0,
            semantic_padding: 0.0,
            emit: InputKind::FeatureMap,
            marker_strength: 10.0,
            baseline: 4.0,
            cell_noise: 0.05,
            blob_width: 0.6,
        }
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedModel {
    pub parts: usize,
    pub types: usize,
    pub channels: usize,
    /// `prototypes[m][k]` is the planted mean of type `k` in part `m`.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    pub noise: f64,
    pub separation: f64,
    /// Smallest realized prototype distance per part.
    pub min_separation: Vec<f64>,
    /// `q[y]` is the row-major `M x K` type distribution of class `y`.
    pub q: Vec<Vec<f64>>,
    /// Dominant type per class and part.
    pub codes: Vec<Vec<usize>>,
    /// Region `(w0, w1, h0, h1)` and peak cell of each part.
    pub regions: Vec<Region>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub w: (usize, usize),
    pub h: (usize, usize),
    pub peak: (usize, usize),
}

impl PlantedModel {
    /// Overall type frequencies per part, weighted by class sizes.
    pub fn type_frequencies(&self, class_sizes: &[usize]) -> Vec<Vec<f64>> {
        let total: usize = class_sizes.iter().sum();
        (0..self.parts)
            .map(|m| {
                (0..self.types)
                    .map(|k| {
                        class_sizes
                            .iter()
                            .enumerate()
                            .map(|(y, &n)| n as f64 * self.q[y][m * self.types + k])
                            .sum::<f64>()
                            / total as f64
                    })
                    .collect()
            })
            .collect()
    }

    /// Prototypes as an `M x K x C` tensor.
    pub fn prototype_tensor(&self) -> Result<Tensor> {
        let data = self
            .prototypes
            .iter()
            .flatten()
            .flatten()
            .copied()
            .collect();
        Tensor::new(vec![self.parts, self.types, self.channels], data)
    }

    /// Class type distributions, the ground-truth visual codebook.
    pub fn visual_codebook(&self) -> Result<Codebook> {
        let entries = self.q.iter().cloned().enumerate().collect();
        Codebook::new(
            CodebookKind::VisualStructured,
            vec![self.parts, self.types],
            entries,
        )
    }
}

/// A generated dataset together with everything used to produce it.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub planted: PlantedModel,
    /// Planted part features (`M x C`, row-major) in dataset instance order.
    pub part_features: Vec<Vec<f64>>,
    /// Generating type per part, in dataset instance order.
    pub type_labels: Vec<Vec<usize>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let bad = |msg: &str| Err(Error::Config(msg.to_string()));
    if cfg.parts == 0 || cfg.types == 0 || cfg.channels == 0 {
        return bad("parts, types and channels must be positive");
    }
    if cfg.n_seen == 0 || cfg.n_seen >= cfg.n_classes {
        return bad("need 0 < n_seen < n_classes");
    }
    if cfg.per_class == 0 {
        return bad("per_class must be positive");
    }
    if !(cfg.separation > 0.0) || !(cfg.noise >= 0.0) {
        return bad("separation must be positive and noise non-negative");
    }
    if !(0.0..=1.0).contains(&cfg.type_purity) || !(0.0..=1.0).contains(&cfg.train_fraction) {
        return bad("type_purity and train_fraction must lie in [0, 1]");
    }
    if !(0.0..1.0).contains(&cfg.semantic_padding) || !(cfg.attr_noise >= 0.0) {
        return bad("semantic_padding must lie in [0, 1) and attr_noise be non-negative");
    }
    if cfg.emit == InputKind::FeatureMap {
        let (rows, cols) = region_grid(cfg.parts);
        if cfg.width < rows || cfg.height < cols {
            return bad("feature map too small to give every part its own region");
        }
        if cfg.channels < cfg.parts {
            return bad("need at least one channel per part");
        }
    }
    Ok(())
}

fn region_grid(parts: usize) -> (usize, usize) {
    let rows = (parts as f64).sqrt().ceil() as usize;
    let cols = parts.div_ceil(rows);
    (rows, cols)
}

pub fn regions(parts: usize, width: usize, height: usize) -> Vec<Region> {
    let (rows, cols) = region_grid(parts);
    (0..parts)
        .map(|m| {
            let (i, j) = (m / cols, m % cols);
            let w = (i * width / rows, (i + 1) * width / rows);
            let h = (j * height / cols, (j + 1) * height / cols);
            Region {
                w,
                h,
                peak: ((w.0 + w.1 - 1) / 2, (h.0 + h.1 - 1) / 2),
            }
        })
        .collect()
}

fn draw_prototypes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let scale = 1.5 * cfg.separation / (2.0 * cfg.channels as f64).sqrt();
    let min_sq = cfg.separation * cfg.separation;
    'restart: for _ in 0..50 {
        let mut protos: Vec<Vec<f64>> = Vec::with_capacity(cfg.types);
        for _ in 0..cfg.types {
            let mut placed = false;
            for _ in 0..2000 {
                let cand: Vec<f64> = (0..cfg.channels).map(|_| scale * normal(rng)).collect();
                if protos.iter().all(|p| sq_dist(p, &cand) >= min_sq) {
                    protos.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Ok(protos);
    }
    Err(Error::Infeasible(format!(
        "cannot place {} prototypes {} apart in {} dimensions",
        cfg.types, cfg.separation, cfg.channels
    )))
}

fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn violations(codes: &[Vec<usize>], target: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            if hamming(&codes[i], &codes[j]) < target {
                out.push((i, j));
            }
        }
    }
    out
}

/// Dominant type per class and part. Seen classes cover every type of every
/// part when there are enough of them; codes differ in as many parts as the
/// search can achieve (at most 3).
fn choose_codes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let (n, seen, m_parts, k_types) = (cfg.n_classes, cfg.n_seen, cfg.parts, cfg.types);
    let capacity = (k_types as f64).powi(m_parts as i32);
    if (n as f64) > capacity {
        return Err(Error::Infeasible(format!(
            "{n} classes need distinct codes but only {capacity} exist"
        )));
    }
    for target in (1..=m_parts.min(3)).rev() {
        for _ in 0..40 {
            let mut codes = vec![vec![0usize; m_parts]; n];
            for m in 0..m_parts {
                let mut col: Vec<usize> = (0..seen).map(|i| i % k_types).collect();
                col.shuffle(rng);
                for (y, t) in col.into_iter().enumerate() {
                    codes[y][m] = t;
                }
                for code in codes.iter_mut().skip(seen) {
                    code[m] = rng.random_range(0..k_types);
                }
            }
            let mut bad = violations(&codes, target);
            for _ in 0..5000 {
                if bad.is_empty() {
                    return Ok(codes);
                }
                let (a, b) = bad[rng.random_range(0..bad.len())];
                let y = if rng.random::<bool>() { a } else { b };
                let m = rng.random_range(0..m_parts);
                let mut cand = codes.clone();
                if y < seen {
                    let other = rng.random_range(0..seen);
                    let t = cand[y][m];
                    cand[y][m] = cand[other][m];
                    cand[other][m] = t;
                } else {
                    cand[y][m] = rng.random_range(0..k_types);
                }
                let cand_bad = violations(&cand, target);
                if cand_bad.len() <= bad.len() {
                    codes = cand;
                    bad = cand_bad;
                }
            }
        }
    }
    Err(Error::Infeasible(
        "could not find distinct class codes".into(),
    ))
}

/// Generates a dataset, its ground truth, and the planted part features.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Synthetic> {
    validate(cfg)?;
    let (m_parts, k_types, c) = (cfg.parts, cfg.types, cfg.channels);

    let mut proto_rng = seed::rng(cfg.seed, "synth/prototypes");
    let prototypes = (0..m_parts)
        .map(|_| draw_prototypes(cfg, &mut proto_rng))
        .collect::<Result<Vec<_>>>()?;
    let min_separation = prototypes
        .iter()
        .map(|ps| {
            let mut best = f64::INFINITY;
            for i in 0..ps.len() {
                for j in i + 1..ps.len() {
                    best = best.min(sq_dist(&ps[i], &ps[j]).sqrt());
                }
            }
            best
        })
        .collect();

    let mut code_rng = seed::rng(cfg.seed, "synth/codes");
    let codes = choose_codes(cfg, &mut code_rng)?;

    // Type assignments with exact per-class quotas.
    let mut type_rng = seed::rng(cfg.seed, "synth/types");
    let n_off = if k_types > 1 {
        (cfg.per_class as f64 * (1.0 - cfg.type_purity)).round() as usize
    } else {
        0
    };
    let mut assignments = vec![vec![vec![0usize; m_parts]; cfg.per_class]; cfg.n_classes];
    let mut q = vec![vec![0.0; m_parts * k_types]; cfg.n_classes];
    for y in 0..cfg.n_classes {
        for m in 0..m_parts {
            let dom = codes[y][m];
            let mut col = vec![dom; cfg.per_class - n_off];
            for _ in 0..n_off {
                let mut t = type_rng.random_range(0..k_types - 1);
                if t >= dom {
                    t += 1;
                }
                col.push(t);
            }
            col.shuffle(&mut type_rng);
            for (j, t) in col.into_iter().enumerate() {
                assignments[y][j][m] = t;
                q[y][m * k_types + t] += 1.0 / cfg.per_class as f64;
            }
        }
    }
    // Renormalize away the accumulated rounding of repeated 1/n additions.
    for row in q.iter_mut().flat_map(|qy| qy.chunks_mut(k_types)) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }

    let regions = regions(m_parts, cfg.width, cfg.height);
    let mut feat_rng = seed::rng(cfg.seed, "synth/features");
    let mut map_rng = seed::rng(cfg.seed, "synth/maps");
    let mut split_rng = seed::rng(cfg.seed, "synth/split");
    let mut split = SplitSpec {
        seen: (0..cfg.n_seen).collect(),
        unseen: (cfg.n_seen..cfg.n_classes).collect(),
        ..Default::default()
    };
    let mut instances = Vec::new();
    let mut part_features = Vec::new();
    let mut type_labels = Vec::new();
    let n_train = (cfg.per_class as f64 * cfg.train_fraction).round() as usize;
    let id_width = ((cfg.n_classes * cfg.per_class) as f64).log10().floor() as usize + 1;
    for y in 0..cfg.n_classes {
        let mut order: Vec<usize> = (0..cfg.per_class).collect();
        order.shuffle(&mut split_rng);
        let train_slots: Vec<bool> = {
            let mut v = vec![false; cfg.per_class];
            if y < cfg.n_seen {
                for &j in order.iter().take(n_train) {
                    v[j] = true;
                }
            }
            v
        };
        for j in 0..cfg.per_class {
            let types = assignments[y][j].clone();
            let mut f = Vec::with_capacity(m_parts * c);
            for (m, &t) in types.iter().enumerate() {
                for ch in 0..c {
                    f.push(prototypes[m][t][ch] + cfg.noise * normal(&mut feat_rng));
                }
            }
            let id = format!("{:0width$}", y * cfg.per_class + j, width = id_width.max(6));
            let input = match cfg.emit {
                InputKind::PartSet => {
                    InstanceInput::PartSet(Tensor::new(vec![m_parts, c], f.clone())?.quantized())
                }
                InputKind::FeatureMap => InstanceInput::FeatureMap(
                    render_map(cfg, &regions, &f, &mut map_rng)?.quantized(),
                ),
            };
            if train_slots[j] {
                split.train.insert(id.clone());
            } else {
                split.test.insert(id.clone());
            }
            instances.push(Instance {
                id,
                class: y,
                input,
            });
            part_features.push(f);
            type_labels.push(types);
        }
    }

    let codebook = semantic_codebook(cfg, &q)?;
    let dataset = Dataset::new(instances, codebook, split)?;
    Ok(Synthetic {
        dataset,
        planted: PlantedModel {
            parts: m_parts,
            types: k_types,
            channels: c,
            prototypes,
            noise: cfg.noise,
            separation: cfg.separation,
            min_separation,
            q,
            codes,
            regions,
        },
        part_features,
        type_labels,
    })
}

/// Channel block `[start, end)` carrying the marker of part `m`.
pub fn channel_block(m: usize, parts: usize, channels: usize) -> (usize, usize) {
    (m * channels / parts, (m + 1) * channels / parts)
}

fn render_map(
    cfg: &SynthConfig,
    regions: &[Region],
    parts: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (w_n, h_n, c) = (cfg.width, cfg.height, cfg.channels);
    let mut data = vec![0.0; w_n * h_n * c];
    for v in data.iter_mut() {
        *v = cfg.baseline + cfg.cell_noise * normal(rng);
    }
    let two_var = 2.0 * cfg.blob_width * cfg.blob_width;
    for (m, r) in regions.iter().enumerate() {
        let (b0, b1) = channel_block(m, cfg.parts, c);
        let f = &parts[m * c..(m + 1) * c];
        for w in r.w.0..r.w.1 {
            for h in r.h.0..r.h.1 {
                let dw = w as f64 - r.peak.0 as f64;
                let dh = h as f64 - r.peak.1 as f64;
                let omega = (-(dw * dw + dh * dh) / two_var).exp();
                let cell = &mut data[(w * h_n + h) * c..(w * h_n + h + 1) * c];
                for (ch, v) in cell.iter_mut().enumerate() {
                    let marker = if (b0..b1).contains(&ch) {
                        cfg.marker_strength
                    } else {
                        0.0
                    };
                    *v += omega * (marker + f[ch]);
                }
            }
        }
    }
    Tensor::new(vec![w_n, h_n, c], data)
}

fn semantic_codebook(cfg: &SynthConfig, q: &[Vec<f64>]) -> Result<Codebook> {
    let mut rng = seed::rng(cfg.seed, "synth/semantic");
    let visual_dims = cfg.parts * cfg.types;
    let padding =
        (visual_dims as f64 * cfg.semantic_padding / (1.0 - cfg.semantic_padding)).round() as usize;
    let mut entries = BTreeMap::new();
    for (y, qy) in q.iter().enumerate() {
        let mut s: Vec<f64> = qy
            .iter()
            .map(|v| {
                if cfg.attr_noise > 0.0 {
                    v + rng.random_range(-cfg.attr_noise..=cfg.attr_noise)
                } else {
                    *v
                }
            })
            .collect();
        s.extend((0..padding).map(|_| rng.random::<f64>()));
        entries.insert(y, s);
    }
    Codebook::new(CodebookKind::Semantic, vec![visual_dims + padding], entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{class_partition_counts, load_dataset, save_dataset};

    #[test]
    fn default_config_counts() {
        let s = generate_synthetic(&SynthConfig::default()).unwrap();
        let c = class_partition_counts(&s.dataset);
        assert_eq!((c.classes, c.seen, c.unseen, c.images), (14, 10, 4, 420));
        assert_eq!(s.dataset.input_dims().unwrap(), &[7, 7, 32]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig {
            seed: 7,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.planted, b.planted);
        let c = generate_synthetic(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn zero_noise_features_sit_on_prototypes() {
        let cfg = SynthConfig {
            noise: 0.0,
            emit: InputKind::PartSet,
            ..Default::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        for (f, types) in s.part_features.iter().zip(&s.type_labels) {
            for (m, &t) in types.iter().enumerate() {
                assert_eq!(
                    &f[m * cfg.channels..(m + 1) * cfg.channels],
                    &s.planted.prototypes[m][t][..]
                );
            }
        }
    }

    #[test]
    fn planted_invariants() {
        let cfg = SynthConfig::default();
        let s = generate_synthetic(&cfg).unwrap();
        for qy in &s.planted.q {
            for row in qy.chunks(cfg.types) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        for d in &s.planted.min_separation {
            assert!(*d >= cfg.separation);
        }
        // Empirical class type frequencies equal q exactly.
        for y in 0..cfg.n_classes {
            let mut counts = vec![0.0; cfg.parts * cfg.types];
            for (inst, types) in s.dataset.instances().iter().zip(&s.type_labels) {
                if inst.class == y {
                    for (m, &t) in types.iter().enumerate() {
                        counts[m * cfg.types + t] += 1.0 / cfg.per_class as f64;
                    }
                }
            }
            for (a, b) in counts.iter().zip(&s.planted.q[y]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Seen classes cover every type of every part.
        for m in 0..cfg.parts {
            let mut seen_types: Vec<usize> =
                (0..cfg.n_seen).map(|y| s.planted.codes[y][m]).collect();
            seen_types.sort_unstable();
            seen_types.dedup();
            assert_eq!(seen_types.len(), cfg.types);
        }
        // Codes differ in at least three parts.
        for a in 0..cfg.n_classes {
            for b in a + 1..cfg.n_classes {
                assert!(hamming(&s.planted.codes[a], &s.planted.codes[b]) >= 3);
            }
        }
    }

    #[test]
    fn nearest_prototype_is_generating_one() {
        let cfg = SynthConfig {
            emit: InputKind::PartSet,
            per_class: 100,
            ..Default::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        let (mut hits, mut total) = (0usize, 0usize);
        for (f, types) in s.part_features.iter().zip(&s.type_labels) {
            for (m, &t) in types.iter().enumerate() {
                let fm = &f[m * cfg.channels..(m + 1) * cfg.channels];
                let nearest = (0..cfg.types)
                    .min_by(|&a, &b| {
                        sq_dist(fm, &s.planted.prototypes[m][a])
                            .total_cmp(&sq_dist(fm, &s.planted.prototypes[m][b]))
                    })
                    .unwrap();
                hits += usize::from(nearest == t);
                total += 1;
            }
        }
        assert!(hits as f64 / total as f64 > 0.999, "{hits}/{total}");
    }

    #[test]
    fn infeasible_separation_is_reported() {
        let cfg = SynthConfig {
            channels: 1,
            types: 8,
            separation: 10.0,
            emit: InputKind::PartSet,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn padding_and_noise_shape_the_semantic_codebook() {
        let cfg = SynthConfig {
            semantic_padding: 0.5,
            attr_noise: 0.2,
            ..Default::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        assert_eq!(s.dataset.codebook().width(), 2 * cfg.parts * cfg.types);
        let clean = generate_synthetic(&SynthConfig::default()).unwrap();
        assert_eq!(
            clean.dataset.codebook().get(3).unwrap(),
            &clean.planted.q[3][..]
        );
    }

    #[test]
    fn synthetic_directory_loads() {
        let s = generate_synthetic(&SynthConfig {
            per_class: 5,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&s.dataset, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, s.dataset);
    }

    #[test]
    fn parts_get_distinct_regions() {
        let r = regions(4, 7, 7);
        assert_eq!(
            r[0],
            Region {
                w: (0, 3),
                h: (0, 3),
                peak: (1, 1)
            }
        );
        assert_eq!(
            r[3],
            Region {
                w: (3, 7),
                h: (3, 7),
                peak: (4, 4)
            }
        );
    }
}
