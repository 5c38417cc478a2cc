//! Alternating two-step training and model checkpoints.
//!
//! Each epoch, step 1 moves only the grouping weights down the part-learning
//! loss. Step 2 freezes them, recomputes part features, refreshes the
//! mixtures by EM and then updates the classifier (and, in semantic mode, the
//! mapper on the now fixed embeddings).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{self, GroupingModel, PartLossWeights};
use crate::checkpoint::{self, Sections};
use crate::datamodel::{Codebook, CodebookKind, Dataset, Instance, InstanceInput};
use crate::mixture::{self, flatten_pi, EmConfig, EmTrace, MixtureModel, MixturePart, PiEmbedding};
use crate::numerics::{adam_step, AdamConfig, OptimizerState, Tensor};
use crate::oracle::VisualOracle;
use crate::potentials::{
    self, BaselineConfig, Classifier, CompatibilityBaseline, HingeConfig, SemanticMapper,
};
use crate::{par, seed, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Semantic,
    Visual,
    VisualFlat,
    Baseline,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(Mode::Semantic),
            "visual" => Ok(Mode::Visual),
            "visual-flat" => Ok(Mode::VisualFlat),
            "baseline" => Ok(Mode::Baseline),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Adam learning rate of the grouping weights (step 1).
    pub lr_step1: f64,
    /// Adam learning rate of the classifier and prototypes (step 2).
    pub lr_step2: f64,
    /// Adam learning rate of the semantic mapper.
    pub lr_mapper: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub eta: f64,
    pub margin_on_correct: bool,
    /// Parts and types; visual modes take both from the oracle.
    pub parts: usize,
    pub types: usize,
    pub hidden: usize,
    /// Run EM every this many epochs.
    pub em_period: usize,
    pub em_max_steps: usize,
    pub em_tol: f64,
    pub em_inits: usize,
    pub step1_iters: usize,
    pub step2_iters: usize,
    pub mapper_iters: usize,
    pub normalize_codebook: bool,
    /// Also move prototypes along the visual potential's gradient.
    pub theta_grad: bool,
    pub peak_logit: f64,
    pub baseline: BaselineConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Semantic,
            epochs: 10,
            lr_step1: 1e-6,
            lr_step2: 1e-5,
            lr_mapper: 1e-3,
            lambda: 5.0,
            zeta: 0.02,
            eta: 0.2,
            margin_on_correct: false,
            parts: 4,
            types: 16,
            hidden: potentials::DEFAULT_HIDDEN,
            em_period: 1,
            em_max_steps: 300,
            em_tol: 1e-6,
            em_inits: 10,
            step1_iters: 1,
            step2_iters: 1,
            mapper_iters: 50,
            normalize_codebook: true,
            theta_grad: false,
            peak_logit: 6.0,
            baseline: BaselineConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, lr) in [
            ("lr_step1", self.lr_step1),
            ("lr_step2", self.lr_step2),
            ("lr_mapper", self.lr_mapper),
            ("baseline.learning_rate", self.baseline.learning_rate),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.parts < 2 {
            return bad(format!("parts must be at least 2, got {}", self.parts));
        }
        if self.types == 0 || self.hidden == 0 {
            return bad("types and hidden must be positive".into());
        }
        if self.em_period == 0 || self.em_max_steps == 0 {
            return bad("em_period and em_max_steps must be positive".into());
        }
        if !(self.eta >= 0.0) || !(self.lambda >= 0.0) || !(self.zeta >= 0.0) {
            return bad("eta, lambda and zeta must be non-negative".into());
        }
        Ok(())
    }

    fn hinge(&self) -> HingeConfig {
        HingeConfig {
            eta: self.eta,
            margin_on_correct: self.margin_on_correct,
        }
    }

    fn em(&self) -> EmConfig {
        EmConfig {
            max_steps: self.em_max_steps,
            tol: self.em_tol,
            n_init: self.em_inits,
            ..Default::default()
        }
    }
}

/// Source of class-level or instance-level supervision.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a> {
    Codebook(&'a Codebook),
    Oracle(&'a VisualOracle),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean part-learning loss before the step-1 update.
    pub l_prt: f64,
    /// Mean EM NLL over parts after the refresh.
    pub em_nll: f64,
    pub em_steps: usize,
    pub phi_xy: f64,
    pub phi_sx: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Semantic,
    Visual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    /// Learner part feeding embedding row `b`.
    part_order: Vec<usize>,
    baseline_target: Option<TargetKind>,
}

/// Everything needed to predict, plus the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub part_order: Vec<usize>,
    pub grouping: Option<GroupingModel>,
    pub mixture: Option<MixtureModel>,
    pub classifier: Option<Classifier>,
    pub mapper: Option<SemanticMapper>,
    pub baseline: Option<CompatibilityBaseline>,
    pub baseline_target: Option<TargetKind>,
    pub log: Vec<EpochLog>,
}

fn reorder(f: &[f64], order: &[usize]) -> Vec<f64> {
    let c = f.len() / order.len();
    order
        .iter()
        .flat_map(|&a| f[a * c..(a + 1) * c].iter().copied())
        .collect()
}

fn raw_features(input: &InstanceInput) -> &[f64] {
    input.tensor().data()
}

impl Checkpoint {
    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Part features, rows in embedding order.
    pub fn part_features(&self, input: &InstanceInput) -> Result<Vec<f64>> {
        let f = attention::instance_features(self.grouping.as_ref(), input)?;
        if f.len() % self.part_order.len() != 0 {
            return Err(Error::shape(
                format!("{} parts", self.part_order.len()),
                f.len(),
            ));
        }
        Ok(reorder(&f, &self.part_order))
    }

    /// The embedding, flattened in visual-flat mode.
    pub fn embed(&self, input: &InstanceInput) -> Result<PiEmbedding> {
        let mixture = self
            .mixture
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("baseline checkpoints have no embedding".into()))?;
        let pi = mixture::infer_pi(mixture, &self.part_features(input)?)?;
        Ok(match self.mode() {
            Mode::VisualFlat => flatten_pi(&pi),
            _ => pi,
        })
    }

    /// Candidate entries in the form the prediction rule expects.
    pub fn prepare_codebook(
        &self,
        codebook: &Codebook,
        classes: &[usize],
    ) -> Result<Vec<(usize, Vec<f64>)>> {
        let cb = codebook.restrict(classes.iter().copied())?;
        let kind = cb.kind();
        let normalize = self.config.normalize_codebook;
        let mismatch = |want: &str| {
            Err(Error::Config(format!(
                "{:?} model needs a {want} codebook, got {kind:?}",
                self.mode()
            )))
        };
        match self.mode() {
            Mode::Semantic => match kind {
                CodebookKind::Semantic => Ok(cb.scoring_entries(normalize)),
                _ => mismatch("semantic"),
            },
            Mode::Visual => match kind {
                CodebookKind::VisualStructured => Ok(cb.scoring_entries(false)),
                _ => mismatch("structured visual"),
            },
            Mode::VisualFlat => match kind {
                CodebookKind::VisualStructured => Ok(cb.flattened()?.scoring_entries(false)),
                CodebookKind::VisualFlat => Ok(cb.scoring_entries(false)),
                CodebookKind::Semantic => mismatch("visual"),
            },
            Mode::Baseline => match (self.baseline_target, kind) {
                (Some(TargetKind::Semantic), CodebookKind::Semantic) => {
                    Ok(cb.scoring_entries(normalize))
                }
                (Some(TargetKind::Visual), CodebookKind::VisualStructured) => {
                    Ok(cb.flattened()?.scoring_entries(normalize))
                }
                (Some(TargetKind::Visual), CodebookKind::VisualFlat) => {
                    Ok(cb.scoring_entries(normalize))
                }
                (Some(TargetKind::Visual), _) => mismatch("visual"),
                _ => mismatch("semantic"),
            },
        }
    }

    /// Predicted class among prepared `candidates`.
    pub fn predict(
        &self,
        input: &InstanceInput,
        candidates: &[(usize, Vec<f64>)],
    ) -> Result<usize> {
        match self.mode() {
            Mode::Semantic => {
                let mapper = self
                    .mapper
                    .as_ref()
                    .ok_or_else(|| Error::Format("semantic checkpoint without a mapper".into()))?;
                potentials::predict_semantic(mapper, self.embed(input)?.values(), candidates)
            }
            Mode::Visual | Mode::VisualFlat => {
                potentials::predict_visual(self.embed(input)?.values(), candidates)
            }
            Mode::Baseline => self
                .baseline
                .as_ref()
                .ok_or_else(|| Error::Format("baseline checkpoint without a baseline".into()))?
                .predict(raw_features(input), candidates),
        }
    }

    pub fn to_sections(&self) -> Sections {
        let mut s = Sections::default();
        s.push(checkpoint::KIND, b"model".to_vec());
        s.push(
            checkpoint::CONF,
            checkpoint::json(&Meta {
                config: self.config.clone(),
                part_order: self.part_order.clone(),
                baseline_target: self.baseline_target,
            }),
        );
        if let Some(g) = &self.grouping {
            s.push(checkpoint::GRPM, checkpoint::encode_grouping(g));
        }
        if let Some(m) = &self.mixture {
            s.push(checkpoint::MIXT, checkpoint::encode_mixture(m));
        }
        if let Some(c) = &self.classifier {
            s.push(checkpoint::CLSF, checkpoint::encode_classifier(c));
        }
        if let Some(m) = &self.mapper {
            s.push(checkpoint::MAPR, checkpoint::encode_mapper(m));
        }
        if let Some(b) = &self.baseline {
            s.push(checkpoint::BASE, checkpoint::encode_baseline(b));
        }
        s.push(checkpoint::LOG, checkpoint::json(&self.log));
        s
    }

    pub fn from_sections(s: &Sections) -> Result<Self> {
        if s.require(checkpoint::KIND)? != b"model" {
            return Err(Error::Format("file is not a model checkpoint".into()));
        }
        let meta: Meta = checkpoint::from_json(s.require(checkpoint::CONF)?, "model config")?;
        Ok(Checkpoint {
            config: meta.config,
            part_order: meta.part_order,
            grouping: s
                .get(checkpoint::GRPM)
                .map(checkpoint::decode_grouping)
                .transpose()?,
            mixture: s
                .get(checkpoint::MIXT)
                .map(checkpoint::decode_mixture)
                .transpose()?,
            classifier: s
                .get(checkpoint::CLSF)
                .map(checkpoint::decode_classifier)
                .transpose()?,
            mapper: s
                .get(checkpoint::MAPR)
                .map(checkpoint::decode_mapper)
                .transpose()?,
            baseline: s
                .get(checkpoint::BASE)
                .map(checkpoint::decode_baseline)
                .transpose()?,
            baseline_target: meta.baseline_target,
            log: checkpoint::from_json(s.require(checkpoint::LOG)?, "training log")?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.to_sections())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_sections(&checkpoint::decode(bytes)?)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    checkpoint::write_file(&ckpt.to_sections(), path.as_ref())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_sections(&checkpoint::read_file(path.as_ref())?)
}

/// Re-runs EM on every part, warm-started from `mixture`.
pub fn em_refresh(
    mixture: &MixtureModel,
    features: &[Vec<f64>],
    em: &EmConfig,
) -> Result<(MixtureModel, Vec<EmTrace>)> {
    let c = mixture.channels();
    let mut parts = Vec::with_capacity(mixture.num_parts());
    let mut traces = Vec::with_capacity(mixture.num_parts());
    for (m, part) in mixture.parts.iter().enumerate() {
        let rows: Vec<&[f64]> = features.iter().map(|f| &f[m * c..(m + 1) * c]).collect();
        let (p, t) = mixture::em_refine(part, &rows, em)?;
        parts.push(p);
        traces.push(t);
    }
    Ok((MixtureModel::new(parts)?, traces))
}

fn abort(epoch: usize, e: Error) -> Error {
    match e {
        Error::TrainingAborted { .. } => e,
        other => Error::TrainingAborted {
            epoch,
            reason: other.to_string(),
        },
    }
}

fn part_rows(features: &[Vec<f64>], m: usize, c: usize) -> Vec<&[f64]> {
    features.iter().map(|f| &f[m * c..(m + 1) * c]).collect()
}

/// Cost of explaining oracle row `b` with learner part `a`: fit the part's
/// mixture with the oracle posteriors as responsibilities and measure the
/// remaining posterior mismatch.
fn alignment_cost(rows: &[&[f64]], targets: &[Vec<f64>], floor: f64) -> Result<f64> {
    let (part, _) = mixture::m_step(rows, targets, floor)?;
    Ok(rows
        .iter()
        .zip(targets)
        .map(|(f, t)| crate::numerics::sq_dist(&part.posterior(f).0, t))
        .sum())
}

/// Orders learner parts to match oracle rows and fits their mixtures to the
/// oracle's type indexing.
fn align_to_oracle(
    features: &[Vec<f64>],
    targets: &[PiEmbedding],
    parts: usize,
    em: &EmConfig,
) -> Result<(Vec<usize>, MixtureModel)> {
    let c = features[0].len() / parts;
    let rows_by_part: Vec<Vec<&[f64]>> = (0..parts).map(|m| part_rows(features, m, c)).collect();
    let target_rows: Vec<Vec<Vec<f64>>> = (0..parts)
        .map(|b| targets.iter().map(|t| t.row(b).to_vec()).collect())
        .collect();
    let costs: Vec<Result<Vec<f64>>> = par::map_range(parts, |a| {
        (0..parts)
            .map(|b| alignment_cost(&rows_by_part[a], &target_rows[b], em.variance_floor))
            .collect()
    });
    let cost: Vec<Vec<f64>> = costs.into_iter().collect::<Result<_>>()?;
    let assign = mixture::best_assignment(&cost);
    let mut order = vec![0; parts];
    for (a, &b) in assign.iter().enumerate() {
        order[b] = a;
    }
    let mut mixture_parts: Vec<MixturePart> = Vec::with_capacity(parts);
    for (b, &a) in order.iter().enumerate() {
        let (start, _) = mixture::m_step(&rows_by_part[a], &target_rows[b], em.variance_floor)?;
        mixture_parts.push(start);
    }
    Ok((order, MixtureModel::new(mixture_parts)?))
}

struct Batch<'a> {
    instances: Vec<&'a Instance>,
    maps: Vec<&'a Tensor>,
}

fn learner_features(
    grouping: Option<&GroupingModel>,
    order: &[usize],
    instances: &[&Instance],
) -> Result<Vec<Vec<f64>>> {
    par::map(instances, |i| {
        attention::instance_features(grouping, &i.input).map(|f| reorder(&f, order))
    })
    .into_iter()
    .collect()
}

/// Trains a model of `cfg.mode` on the train split of `dataset`.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    supervision: Supervision<'_>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    match (cfg.mode, supervision) {
        (Mode::Semantic, Supervision::Codebook(cb)) if cb.kind() == CodebookKind::Semantic => {}
        (Mode::Semantic, _) => {
            return Err(Error::Config(
                "semantic mode needs a semantic codebook".into(),
            ))
        }
        (Mode::Visual | Mode::VisualFlat, Supervision::Oracle(_)) => {}
        (Mode::Visual | Mode::VisualFlat, _) => {
            return Err(Error::Config("visual modes need a visual oracle".into()))
        }
        (Mode::Baseline, Supervision::Codebook(cb)) if cb.kind() == CodebookKind::Semantic => {}
        (Mode::Baseline, Supervision::Oracle(_)) => {}
        (Mode::Baseline, _) => {
            return Err(Error::Config(
                "baseline needs a semantic codebook or an oracle".into(),
            ))
        }
    }
    let instances = dataset.train_instances();
    if instances.is_empty() {
        return Err(Error::InvalidInput("empty train split".into()));
    }
    if cfg.mode == Mode::Baseline {
        return train_baseline(dataset, cfg, supervision, &instances);
    }

    let (parts, types) = match supervision {
        Supervision::Oracle(o) => (o.mixture.num_parts(), o.mixture.types()),
        Supervision::Codebook(_) => (cfg.parts, cfg.types),
    };
    let dims = dataset.input_dims().expect("non-empty dataset").to_vec();
    let batch = Batch {
        maps: instances
            .iter()
            .filter_map(|i| match &i.input {
                InstanceInput::FeatureMap(t) => Some(t),
                InstanceInput::PartSet(_) => None,
            })
            .collect(),
        instances,
    };
    let mut grouping = match batch.instances[0].input {
        InstanceInput::FeatureMap(_) => {
            if parts > dims[2] {
                return Err(Error::Config(format!(
                    "{parts} parts exceed {} channels",
                    dims[2]
                )));
            }
            Some(attention::init_from_channel_peaks(
                &batch.maps,
                parts,
                cfg.peak_logit,
                &mut seed::rng(cfg.seed, "trainer/grouping"),
            )?)
        }
        InstanceInput::PartSet(_) => {
            if dims[0] != parts {
                return Err(Error::Config(format!(
                    "{parts} parts configured, part sets have {}",
                    dims[0]
                )));
            }
            None
        }
    };
    let identity: Vec<usize> = (0..parts).collect();
    let features = learner_features(grouping.as_ref(), &identity, &batch.instances)?;
    let channels = features[0].len() / parts;
    let em = cfg.em();

    let targets: Option<Vec<PiEmbedding>> = match supervision {
        Supervision::Oracle(o) => Some(
            par::map(&batch.instances, |i| o.structured_pi(&i.input))
                .into_iter()
                .collect::<Result<_>>()?,
        ),
        Supervision::Codebook(_) => None,
    };
    let (part_order, mut mixture) = match &targets {
        Some(t) => align_to_oracle(&features, t, parts, &em)?,
        None => {
            let mut mparts = Vec::with_capacity(parts);
            for m in 0..parts {
                let mut rng = seed::rng(cfg.seed, &format!("trainer/em/{m}"));
                mparts.push(
                    mixture::em_fit(&part_rows(&features, m, channels), types, &em, &mut rng)?.0,
                );
            }
            (identity, MixtureModel::new(mparts)?)
        }
    };

    let seen: Vec<usize> = dataset.split().seen.iter().copied().collect();
    let mut classifier = Classifier::new(
        seen.clone(),
        parts * channels,
        &mut seed::rng(cfg.seed, "trainer/classifier"),
    )?;
    let semantic_book = match supervision {
        Supervision::Codebook(cb) => Some(
            cb.restrict(seen.iter().copied())?
                .scoring_entries(cfg.normalize_codebook),
        ),
        Supervision::Oracle(_) => None,
    };
    let mut mapper = match &semantic_book {
        Some(book) => Some(SemanticMapper::new(
            parts * types,
            cfg.hidden,
            book[0].1.len(),
            &mut seed::rng(cfg.seed, "trainer/mapper"),
        )?),
        None => None,
    };

    let weights = PartLossWeights {
        lambda: cfg.lambda,
        zeta: cfg.zeta,
    };
    let labels: Vec<usize> = batch.instances.iter().map(|i| i.class).collect();
    let mut g_state = grouping
        .as_ref()
        .map(|g| OptimizerState::new(g.num_params(), AdamConfig::with_learning_rate(cfg.lr_step1)));
    let mut c_state = OptimizerState::new(
        classifier.num_params(),
        AdamConfig::with_learning_rate(cfg.lr_step2),
    );
    let mut m_state = mapper.as_ref().map(|m| {
        OptimizerState::new(
            m.num_params(),
            AdamConfig::with_learning_rate(cfg.lr_mapper),
        )
    });
    let mut t_state = OptimizerState::new(
        parts * types * channels,
        AdamConfig::with_learning_rate(cfg.lr_step2),
    );
    let flat = cfg.mode == Mode::VisualFlat;
    let n = batch.instances.len() as f64;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // Step 1: grouping only.
        let mut l_prt = f64::NAN;
        if let (Some(g), Some(state)) = (grouping.as_mut(), g_state.as_mut()) {
            for it in 0..cfg.step1_iters {
                let (l, grad) = attention::batch_loss_prt_grad(g, &batch.maps, weights)
                    .map_err(|e| abort(epoch, e))?;
                if it == 0 {
                    l_prt = l;
                }
                if !l.is_finite() {
                    return Err(diverged(epoch, "L_prt", l));
                }
                let mut p = g.flat_params();
                adam_step(&mut p, &grad, state).map_err(|e| abort(epoch, e))?;
                g.set_flat_params(&p);
            }
        }

        // Step 2: grouping frozen.
        let features = learner_features(grouping.as_ref(), &part_order, &batch.instances)
            .map_err(|e| abort(epoch, e))?;
        let (mut em_nll, mut em_steps) = (f64::NAN, 0);
        if epoch % cfg.em_period == 0 {
            let (refreshed, traces) =
                em_refresh(&mixture, &features, &em).map_err(|e| abort(epoch, e))?;
            mixture = refreshed;
            em_nll = traces.iter().map(EmTrace::final_nll).sum::<f64>() / parts as f64;
            em_steps = traces.iter().map(EmTrace::steps).sum();
        }

        let mut phi_xy = 0.0;
        for it in 0..cfg.step2_iters {
            let per: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = par::map_range(features.len(), |i| {
                classifier.phi_xy_grad(&features[i], labels[i])
            });
            let mut grad = vec![0.0; classifier.num_params()];
            let mut total = 0.0;
            for r in per {
                let (phi, g, _) = r.map_err(|e| abort(epoch, e))?;
                total += phi;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a -= b / n;
                }
            }
            if it == 0 {
                phi_xy = total / n;
            }
            if !total.is_finite() {
                return Err(diverged(epoch, "phi_XY", total));
            }
            let mut p = classifier.flat_params();
            adam_step(&mut p, &grad, &mut c_state).map_err(|e| abort(epoch, e))?;
            classifier.set_flat_params(&p);
        }

        let phi_sx = match (&targets, &semantic_book) {
            (Some(targets), _) => {
                if cfg.theta_grad {
                    theta_step(&mut mixture, &features, targets, flat, &mut t_state)
                        .map_err(|e| abort(epoch, e))?;
                }
                visual_potential(&mixture, &features, targets, flat).map_err(|e| abort(epoch, e))?
            }
            (None, Some(book)) => {
                let (mapper, state) = (
                    mapper.as_mut().expect("semantic mapper"),
                    m_state.as_mut().expect("state"),
                );
                let pis: Vec<Vec<f64>> = par::map(&features, |f| {
                    mixture::infer_pi(&mixture, f).map(PiEmbedding::into_values)
                })
                .into_iter()
                .collect::<Result<_>>()
                .map_err(|e| abort(epoch, e))?;
                fit_mapper(mapper, state, &pis, &labels, book, cfg).map_err(|e| abort(epoch, e))?
            }
            (None, None) => unreachable!("supervision checked above"),
        };
        if !phi_sx.is_finite() {
            return Err(diverged(epoch, "phi_SX", phi_sx));
        }
        log.push(EpochLog {
            epoch,
            l_prt,
            em_nll,
            em_steps,
            phi_xy,
            phi_sx,
        });
    }

    Ok(Checkpoint {
        config: TrainConfig {
            parts,
            types,
            ..cfg.clone()
        },
        part_order,
        grouping,
        mixture: Some(mixture),
        classifier: Some(classifier),
        mapper,
        baseline: None,
        baseline_target: None,
        log,
    })
}

fn diverged(epoch: usize, what: &str, value: f64) -> Error {
    Error::TrainingAborted {
        epoch,
        reason: format!("{what} became {value} in epoch {epoch}"),
    }
}

fn pi_pair(
    mixture: &MixtureModel,
    f: &[f64],
    target: &PiEmbedding,
    flat: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let pi = mixture::infer_pi(mixture, f)?;
    Ok(if flat {
        (
            flatten_pi(&pi).into_values(),
            flatten_pi(target).into_values(),
        )
    } else {
        (pi.into_values(), target.values().to_vec())
    })
}

/// Mean visual potential against instance-level oracle embeddings.
fn visual_potential(
    mixture: &MixtureModel,
    features: &[Vec<f64>],
    targets: &[PiEmbedding],
    flat: bool,
) -> Result<f64> {
    let per: Vec<Result<f64>> = par::map_range(features.len(), |i| {
        let (pi, t) = pi_pair(mixture, &features[i], &targets[i], flat)?;
        potentials::phi_sx_visual(&t, &pi).map(|(phi, _)| phi)
    });
    let mut total = 0.0;
    for p in per {
        total += p?;
    }
    Ok(total / features.len() as f64)
}

/// One Adam step on all prototypes ascending the mean visual potential.
fn theta_step(
    mixture: &mut MixtureModel,
    features: &[Vec<f64>],
    targets: &[PiEmbedding],
    flat: bool,
    state: &mut OptimizerState,
) -> Result<()> {
    let (parts, types, c) = (mixture.num_parts(), mixture.types(), mixture.channels());
    let scale = if flat { 1.0 / parts as f64 } else { 1.0 };
    let snapshot = mixture.clone();
    let per: Vec<Result<Vec<f64>>> = par::map_range(features.len(), |i| {
        let (pi, t) = pi_pair(&snapshot, &features[i], &targets[i], flat)?;
        let (_, d_phi) = potentials::phi_sx_visual(&t, &pi)?;
        let mut g = Vec::with_capacity(parts * types * c);
        for m in 0..parts {
            // Descend on the negated potential; flat entries are rows / M.
            let d_pi: Vec<f64> = d_phi[m * types..(m + 1) * types]
                .iter()
                .map(|v| -v * scale)
                .collect();
            g.extend(mixture::posterior_prototype_grad(
                &snapshot.parts[m],
                &features[i][m * c..(m + 1) * c],
                &d_pi,
            ));
        }
        Ok(g)
    });
    let n = features.len() as f64;
    let mut grad = vec![0.0; parts * types * c];
    for g in per {
        for (a, b) in grad.iter_mut().zip(&g?) {
            *a += b / n;
        }
    }
    let mut params: Vec<f64> = mixture
        .parts
        .iter()
        .flat_map(|p| p.prototypes.iter().flatten().copied())
        .collect();
    adam_step(&mut params, &grad, state)?;
    for (m, part) in mixture.parts.iter_mut().enumerate() {
        for (k, theta) in part.prototypes.iter_mut().enumerate() {
            let start = (m * types + k) * c;
            theta.copy_from_slice(&params[start..start + c]);
        }
    }
    Ok(())
}

/// Fits the mapper on fixed embeddings; returns the mean potential before fitting.
fn fit_mapper(
    mapper: &mut SemanticMapper,
    state: &mut OptimizerState,
    pis: &[Vec<f64>],
    labels: &[usize],
    book: &[(usize, Vec<f64>)],
    cfg: &TrainConfig,
) -> Result<f64> {
    let n = pis.len() as f64;
    let hinge = cfg.hinge();
    let mut first = f64::NAN;
    for it in 0..cfg.mapper_iters.max(1) {
        let per: Vec<Result<(f64, Vec<f64>)>> = par::map_range(pis.len(), |i| {
            mapper.phi_sx_grad(&pis[i], labels[i], book, hinge)
        });
        let mut grad = vec![0.0; mapper.num_params()];
        let mut total = 0.0;
        for r in per {
            let (phi, g) = r?;
            total += phi;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a -= b / n;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("phi_SX at mapper iteration {it}")));
        }
        if it == 0 {
            first = total / n;
        }
        if cfg.mapper_iters == 0 {
            break;
        }
        let mut p = mapper.flat_params();
        adam_step(&mut p, &grad, state)?;
        mapper.set_flat_params(&p);
    }
    Ok(first)
}

fn train_baseline(
    dataset: &Dataset,
    cfg: &TrainConfig,
    supervision: Supervision<'_>,
    instances: &[&Instance],
) -> Result<Checkpoint> {
    let seen: Vec<usize> = dataset.split().seen.iter().copied().collect();
    let (book, target) = match supervision {
        Supervision::Codebook(cb) => (
            cb.restrict(seen.iter().copied())?
                .scoring_entries(cfg.normalize_codebook),
            TargetKind::Semantic,
        ),
        Supervision::Oracle(o) => {
            let pis = par::map(instances, |i| {
                o.structured_pi(&i.input).map(|p| flatten_pi(&p))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let items: Vec<(usize, &PiEmbedding)> =
                instances.iter().map(|i| i.class).zip(pis.iter()).collect();
            (
                mixture::class_average_pi(&items, &seen)?.scoring_entries(cfg.normalize_codebook),
                TargetKind::Visual,
            )
        }
    };
    let inputs: Vec<(&[f64], usize)> = instances
        .iter()
        .map(|i| (raw_features(&i.input), i.class))
        .collect();
    let baseline = potentials::baseline_fit(
        &inputs,
        &book,
        &cfg.baseline,
        &mut seed::rng(cfg.seed, "trainer/baseline"),
    )
    .map_err(|e| abort(0, e))?;
    Ok(Checkpoint {
        config: cfg.clone(),
        part_order: Vec::new(),
        grouping: None,
        mixture: None,
        classifier: None,
        mapper: None,
        baseline: Some(baseline),
        baseline_target: Some(target),
        log: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic, SynthConfig};
    use crate::oracle::{build_oracle, OracleConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            types: 4,
            n_classes: 8,
            n_seen: 6,
            per_class: 20,
            ..Default::default()
        }
    }

    fn quick(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 2,
            types: 4,
            hidden: 16,
            mapper_iters: 5,
            baseline: BaselineConfig {
                epochs: 5,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn mode_and_supervision_must_agree() {
        let s = generate_synthetic(&small()).unwrap();
        let err = train(
            &s.dataset,
            &quick(Mode::Visual),
            Supervision::Codebook(s.dataset.codebook()),
        );
        assert!(matches!(err, Err(Error::Config(_))));
        let bad = TrainConfig {
            lr_step1: 0.0,
            ..quick(Mode::Semantic)
        };
        assert!(matches!(
            train(
                &s.dataset,
                &bad,
                Supervision::Codebook(s.dataset.codebook())
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_epochs_still_predicts() {
        let s = generate_synthetic(&small()).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..quick(Mode::Semantic)
        };
        let ck = train(
            &s.dataset,
            &cfg,
            Supervision::Codebook(s.dataset.codebook()),
        )
        .unwrap();
        assert!(ck.log.is_empty());
        let book = ck
            .prepare_codebook(s.dataset.codebook(), s.dataset.classes())
            .unwrap();
        let y = ck.predict(&s.dataset.instances()[0].input, &book).unwrap();
        assert!(s.dataset.classes().contains(&y));
    }

    #[test]
    fn semantic_training_is_deterministic_and_round_trips() {
        let s = generate_synthetic(&small()).unwrap();
        let cfg = quick(Mode::Semantic);
        let a = train(
            &s.dataset,
            &cfg,
            Supervision::Codebook(s.dataset.codebook()),
        )
        .unwrap();
        let b = train(
            &s.dataset,
            &cfg,
            Supervision::Codebook(s.dataset.codebook()),
        )
        .unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.log.len(), 2);
        let back = Checkpoint::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes(), a.to_bytes());
    }

    #[test]
    fn visual_and_baseline_modes_run() {
        let s = generate_synthetic(&small()).unwrap();
        let oracle = build_oracle(
            &s.dataset,
            &OracleConfig {
                types: 4,
                epochs: 1,
                ..Default::default()
            },
            "t",
        )
        .unwrap();
        let cb = crate::oracle::oracle_codebook(&oracle, &s.dataset, s.dataset.classes()).unwrap();
        for mode in [Mode::Visual, Mode::VisualFlat, Mode::Baseline] {
            let ck = train(&s.dataset, &quick(mode), Supervision::Oracle(&oracle)).unwrap();
            let book = ck.prepare_codebook(&cb, s.dataset.classes()).unwrap();
            ck.predict(&s.dataset.instances()[3].input, &book).unwrap();
            assert!(ck
                .prepare_codebook(s.dataset.codebook(), s.dataset.classes())
                .is_err());
        }
    }
}
