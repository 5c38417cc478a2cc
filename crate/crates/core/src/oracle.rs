//! The visual oracle: an independently parameterized attention model and
//! mixture that reveal `Π_vo(x)` score lists for supervision and
//! class-averaged signatures for evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::{self, GroupingModel, PartLossWeights};
use crate::checkpoint::{self, Sections};
use crate::datamodel::{Codebook, Dataset, Instance, InstanceInput};
use crate::mixture::{self, class_average_pi, flatten_pi, EmConfig, MixtureModel, PiEmbedding};
use crate::numerics::{adam_step, AdamConfig, OptimizerState, Tensor};
use crate::potentials::Classifier;
use crate::{par, seed, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    #[default]
    Structured,
    Flat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub epochs: usize,
    pub lr_grouping: f64,
    pub lr_classifier: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub parts: usize,
    pub types: usize,
    pub em_max_steps: usize,
    pub em_tol: f64,
    pub em_inits: usize,
    /// Shuffle feature-map channels before anything else sees them.
    pub permute_channels: bool,
    /// Target logit at each part's best cell after initialization.
    pub peak_logit: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            kind: OracleKind::Structured,
            epochs: 5,
            lr_grouping: 1e-4,
            lr_classifier: 1e-3,
            lambda: 5.0,
            zeta: 0.02,
            parts: 4,
            types: 16,
            em_max_steps: 300,
            em_tol: 1e-6,
            em_inits: 10,
            permute_channels: true,
            peak_logit: 6.0,
            seed: 1,
        }
    }
}

/// Where an oracle came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub source: String,
}

/// EM summary of one part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSummary {
    pub initial_nll: f64,
    pub final_nll: f64,
    pub steps: usize,
    pub max_increase: f64,
    pub reseeded: usize,
    pub converged: bool,
}

impl FitSummary {
    pub fn from_trace(t: &mixture::EmTrace) -> Self {
        FitSummary {
            initial_nll: t.initial_nll,
            final_nll: t.final_nll(),
            steps: t.steps(),
            max_increase: t.max_increase(),
            reseeded: t.reseeded.len(),
            converged: t.converged,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleMeta {
    config: OracleConfig,
    provenance: Provenance,
    fit: Vec<FitSummary>,
    /// Per-epoch `(L_prt, φ_XY)` means.
    training: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualOracle {
    pub config: OracleConfig,
    pub provenance: Provenance,
    pub grouping: Option<GroupingModel>,
    pub mixture: MixtureModel,
    pub channel_perm: Option<Vec<usize>>,
    pub fit: Vec<FitSummary>,
    pub training: Vec<(f64, f64)>,
}

fn permute_map(map: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let c = perm.len();
    let data = map
        .data()
        .chunks(c)
        .flat_map(|cell| perm.iter().map(move |&p| cell[p]))
        .collect();
    Tensor::new(map.dims().to_vec(), data)
}

impl VisualOracle {
    pub fn kind(&self) -> OracleKind {
        self.config.kind
    }

    fn view(&self, input: &InstanceInput) -> Result<InstanceInput> {
        Ok(match (input, &self.channel_perm) {
            (InstanceInput::FeatureMap(m), Some(p)) => {
                if m.dims().last() != Some(&p.len()) {
                    return Err(Error::shape(
                        format!("{} channels", p.len()),
                        format!("{:?}", m.dims()),
                    ));
                }
                InstanceInput::FeatureMap(permute_map(m, p)?)
            }
            _ => input.clone(),
        })
    }

    /// Oracle part features of one input.
    pub fn part_features(&self, input: &InstanceInput) -> Result<Vec<f64>> {
        attention::instance_features(self.grouping.as_ref(), &self.view(input)?)
    }

    /// Structured embedding regardless of the oracle kind.
    pub fn structured_pi(&self, input: &InstanceInput) -> Result<PiEmbedding> {
        mixture::infer_pi(&self.mixture, &self.part_features(input)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write_file(&self.to_sections(), path.as_ref())
    }

    pub fn to_sections(&self) -> Sections {
        let mut s = Sections::default();
        s.push(checkpoint::KIND, b"oracle".to_vec());
        s.push(
            checkpoint::CONF,
            checkpoint::json(&OracleMeta {
                config: self.config.clone(),
                provenance: self.provenance.clone(),
                fit: self.fit.clone(),
                training: self.training.clone(),
            }),
        );
        if let Some(g) = &self.grouping {
            s.push(checkpoint::GRPM, checkpoint::encode_grouping(g));
        }
        s.push(checkpoint::MIXT, checkpoint::encode_mixture(&self.mixture));
        if let Some(p) = &self.channel_perm {
            s.push(checkpoint::PERM, checkpoint::encode_perm(p));
        }
        s
    }

    pub fn from_sections(s: &Sections) -> Result<Self> {
        if s.require(checkpoint::KIND)? != b"oracle" {
            return Err(Error::Format("file is not an oracle checkpoint".into()));
        }
        let meta: OracleMeta =
            checkpoint::from_json(s.require(checkpoint::CONF)?, "oracle config")?;
        let grouping = s
            .get(checkpoint::GRPM)
            .map(checkpoint::decode_grouping)
            .transpose()?;
        let mixture = checkpoint::decode_mixture(s.require(checkpoint::MIXT)?)?;
        let channel_perm = s
            .get(checkpoint::PERM)
            .map(checkpoint::decode_perm)
            .transpose()?;
        Ok(VisualOracle {
            config: meta.config,
            provenance: meta.provenance,
            grouping,
            mixture,
            channel_perm,
            fit: meta.fit,
            training: meta.training,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_sections(&checkpoint::read_file(path.as_ref())?)
    }
}

/// Per-instance loss terms and gradients of `L_prt - φ_XY`.
fn oracle_objective(
    grouping: &GroupingModel,
    classifier: &Classifier,
    map: &Tensor,
    class: usize,
    weights: PartLossWeights,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let parts = attention::forward(grouping, map)?;
    let (l_prt, d_att) =
        attention::loss_prt_with_grad(&parts.attention, grouping.parts(), parts.dims.1, weights)?;
    let (phi, g_clf, g_f) = classifier.phi_xy_grad(&parts.features, class)?;
    let neg_gf: Vec<f64> = g_f.iter().map(|v| -v).collect();
    let g_grp = attention::backward(grouping, map, &parts, Some(&d_att), Some(&neg_gf))?;
    Ok((l_prt, phi, g_grp, g_clf))
}

/// Trains the oracle on the train split of `dataset`.
pub fn build_oracle(dataset: &Dataset, cfg: &OracleConfig, source: &str) -> Result<VisualOracle> {
    let train: Vec<&Instance> = dataset.train_instances();
    if train.is_empty() {
        return Err(Error::InvalidInput(
            "oracle needs a non-empty train split".into(),
        ));
    }
    if cfg.types == 0 {
        return Err(Error::Config("oracle needs at least one type".into()));
    }
    let dims = dataset.input_dims().expect("non-empty dataset").to_vec();
    let mut oracle = VisualOracle {
        config: cfg.clone(),
        provenance: Provenance {
            seed: cfg.seed,
            source: source.to_string(),
        },
        grouping: None,
        mixture: MixtureModel { parts: Vec::new() },
        channel_perm: None,
        fit: Vec::new(),
        training: Vec::new(),
    };
    match &train[0].input {
        InstanceInput::PartSet(_) => {
            if dims[0] != cfg.parts {
                return Err(Error::Config(format!(
                    "oracle configured for {} parts but part sets have {}",
                    cfg.parts, dims[0]
                )));
            }
        }
        InstanceInput::FeatureMap(_) => {
            let c = dims[2];
            if cfg.parts < 2 || cfg.parts > c {
                return Err(Error::Config(format!(
                    "oracle needs 2 <= parts <= channels ({c}), got {}",
                    cfg.parts
                )));
            }
            if cfg.permute_channels {
                let mut perm: Vec<usize> = (0..c).collect();
                perm.shuffle(&mut seed::rng(cfg.seed, "oracle/channels"));
                oracle.channel_perm = Some(perm);
            }
            let maps: Vec<Tensor> = train
                .iter()
                .map(|i| oracle.view(&i.input).map(|v| v.tensor().clone()))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = maps.iter().collect();
            let mut grouping = attention::init_from_channel_peaks(
                &refs,
                cfg.parts,
                cfg.peak_logit,
                &mut seed::rng(cfg.seed, "oracle/grouping"),
            )?;
            let mut classifier = Classifier::new(
                dataset.split().seen.iter().copied().collect(),
                cfg.parts * c,
                &mut seed::rng(cfg.seed, "oracle/classifier"),
            )?;
            let weights = PartLossWeights {
                lambda: cfg.lambda,
                zeta: cfg.zeta,
            };
            let mut g_state = OptimizerState::new(
                grouping.num_params(),
                AdamConfig::with_learning_rate(cfg.lr_grouping),
            );
            let mut c_state = OptimizerState::new(
                classifier.num_params(),
                AdamConfig::with_learning_rate(cfg.lr_classifier),
            );
            let classes: Vec<usize> = train.iter().map(|i| i.class).collect();
            for epoch in 0..cfg.epochs {
                let per = par::map_range(maps.len(), |i| {
                    oracle_objective(&grouping, &classifier, &maps[i], classes[i], weights)
                });
                let n = maps.len() as f64;
                let (mut l_sum, mut phi_sum) = (0.0, 0.0);
                let mut g_grp = vec![0.0; grouping.num_params()];
                let mut g_clf = vec![0.0; classifier.num_params()];
                for r in per {
                    let (l, phi, gg, gc) = r?;
                    l_sum += l;
                    phi_sum += phi;
                    for (a, b) in g_grp.iter_mut().zip(&gg) {
                        *a += b / n;
                    }
                    for (a, b) in g_clf.iter_mut().zip(&gc) {
                        *a -= b / n;
                    }
                }
                let (l_mean, phi_mean) = (l_sum / n, phi_sum / n);
                if !l_mean.is_finite() || !phi_mean.is_finite() {
                    return Err(Error::TrainingAborted {
                        epoch,
                        reason: format!(
                            "oracle loss not finite (L_prt {l_mean}, phi_XY {phi_mean})"
                        ),
                    });
                }
                oracle.training.push((l_mean, phi_mean));
                let mut gp = grouping.flat_params();
                adam_step(&mut gp, &g_grp, &mut g_state).map_err(|e| abort(epoch, e))?;
                grouping.set_flat_params(&gp);
                let mut cp = classifier.flat_params();
                adam_step(&mut cp, &g_clf, &mut c_state).map_err(|e| abort(epoch, e))?;
                classifier.set_flat_params(&cp);
            }
            oracle.grouping = Some(grouping);
        }
    }

    let features: Vec<Vec<f64>> = par::map(&train, |i| oracle.part_features(&i.input))
        .into_iter()
        .collect::<Result<_>>()?;
    let c = features[0].len() / cfg.parts;
    let em = EmConfig {
        max_steps: cfg.em_max_steps,
        tol: cfg.em_tol,
        n_init: cfg.em_inits,
        ..Default::default()
    };
    let mut parts = Vec::with_capacity(cfg.parts);
    for m in 0..cfg.parts {
        let rows: Vec<&[f64]> = features.iter().map(|f| &f[m * c..(m + 1) * c]).collect();
        let mut rng = seed::rng(cfg.seed, &format!("oracle/em/{m}"));
        let (part, trace) = mixture::em_fit(&rows, cfg.types, &em, &mut rng)?;
        oracle.fit.push(FitSummary::from_trace(&trace));
        parts.push(part);
    }
    oracle.mixture = MixtureModel::new(parts)?;
    Ok(oracle)
}

fn abort(epoch: usize, e: Error) -> Error {
    Error::TrainingAborted {
        epoch,
        reason: e.to_string(),
    }
}

/// `Π_vo(x)`, flattened for a flat oracle.
pub fn oracle_pi(oracle: &VisualOracle, input: &InstanceInput) -> Result<PiEmbedding> {
    let pi = oracle.structured_pi(input)?;
    Ok(match oracle.kind() {
        OracleKind::Structured => pi,
        OracleKind::Flat => flatten_pi(&pi),
    })
}

pub fn oracle_pi_batch(oracle: &VisualOracle, instances: &[&Instance]) -> Result<Vec<PiEmbedding>> {
    par::map(instances, |i| oracle_pi(oracle, &i.input))
        .into_iter()
        .collect()
}

/// Class-averaged `Π̄_vo` over every instance of `classes`, seen or unseen.
pub fn oracle_codebook(
    oracle: &VisualOracle,
    dataset: &Dataset,
    classes: &[usize],
) -> Result<Codebook> {
    let chosen: Vec<&Instance> = dataset
        .instances()
        .iter()
        .filter(|i| classes.contains(&i.class))
        .collect();
    let pis = oracle_pi_batch(oracle, &chosen)?;
    let items: Vec<(usize, &PiEmbedding)> =
        chosen.iter().map(|i| i.class).zip(pis.iter()).collect();
    if items.is_empty() {
        return Err(Error::InvalidInput(
            "no instances for the requested classes".into(),
        ));
    }
    class_average_pi(&items, classes)
}

/// Embeddings of `instances` as an `n x M x K` (structured) or `n x M·K`
/// (flat) tensor.
pub fn export_pi(oracle: &VisualOracle, instances: &[&Instance]) -> Result<Tensor> {
    let pis = oracle_pi_batch(oracle, instances)?;
    let (m, k) = (oracle.mixture.num_parts(), oracle.mixture.types());
    let dims = match oracle.kind() {
        OracleKind::Structured => vec![instances.len(), m, k],
        OracleKind::Flat => vec![instances.len(), m * k],
    };
    Tensor::new(
        dims,
        pis.into_iter().flat_map(PiEmbedding::into_values).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic, InputKind, SynthConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            types: 4,
            n_classes: 8,
            n_seen: 6,
            per_class: 20,
            ..Default::default()
        }
    }

    #[test]
    fn part_set_oracle_is_plain_em() {
        let cfg = SynthConfig {
            emit: InputKind::PartSet,
            ..small()
        };
        let s = generate_synthetic(&cfg).unwrap();
        let oc = OracleConfig {
            types: 4,
            epochs: 0,
            ..Default::default()
        };
        let oracle = build_oracle(&s.dataset, &oc, "synthetic").unwrap();
        assert!(oracle.grouping.is_none());
        let train = s.dataset.train_instances();
        let c = cfg.channels;
        for m in 0..cfg.parts {
            let rows: Vec<&[f64]> = train
                .iter()
                .map(|i| &i.input.tensor().data()[m * c..(m + 1) * c])
                .collect();
            let mut rng = seed::rng(oc.seed, &format!("oracle/em/{m}"));
            let em = EmConfig {
                n_init: oc.em_inits,
                ..Default::default()
            };
            let (part, _) = mixture::em_fit(&rows, 4, &em, &mut rng).unwrap();
            assert_eq!(part, oracle.mixture.parts[m]);
        }
    }

    #[test]
    fn oracle_is_deterministic_and_round_trips() {
        let s = generate_synthetic(&small()).unwrap();
        let oc = OracleConfig {
            types: 4,
            epochs: 2,
            ..Default::default()
        };
        let a = build_oracle(&s.dataset, &oc, "x").unwrap();
        let b = build_oracle(&s.dataset, &oc, "x").unwrap();
        assert_eq!(a, b);
        let bytes = checkpoint::encode(&a.to_sections());
        let back = VisualOracle::from_sections(&checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, a);

        let inst = &s.dataset.instances()[0];
        let pi = oracle_pi(&a, &inst.input).unwrap();
        pi.validate().unwrap();
        let flat = VisualOracle {
            config: OracleConfig {
                kind: OracleKind::Flat,
                ..oc
            },
            ..a.clone()
        };
        let fp = oracle_pi(&flat, &inst.input).unwrap();
        assert!(fp.is_flat());
        assert!((fp.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let cb = oracle_codebook(&a, &s.dataset, s.dataset.classes()).unwrap();
        assert_eq!(cb.len(), 8);
        let t = export_pi(&a, &s.dataset.train_instances()).unwrap();
        assert_eq!(&t.dims()[1..], &[4, 4]);
    }
}
