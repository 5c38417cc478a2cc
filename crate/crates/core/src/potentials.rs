//! Pairwise potentials between the instance, its label and the class
//! signal, plus the two test-time prediction rules and a linear
//! compatibility baseline.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{
    dot, ensure_finite, log_sum_exp_unchecked, sq_dist, AdamConfig, OptimizerState,
};
use crate::{numerics, par, Error, Result};

/// Label-to-semantic potential: the codebook is a one-to-one map.
pub fn phi_ys(y: usize, y_prime: usize) -> u8 {
    u8::from(y == y_prime)
}

fn gaussian_init(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Fully-connected softmax classifier over seen classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    /// Class id of each output row, ascending.
    pub classes: Vec<usize>,
    pub input_dim: usize,
    /// Row-major `|O| x input_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Classifier {
    pub fn new(classes: Vec<usize>, input_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if classes.is_empty() || input_dim == 0 {
            return Err(Error::InvalidInput(
                "classifier needs classes and inputs".into(),
            ));
        }
        let n = classes.len();
        Ok(Classifier {
            classes,
            input_dim,
            weight: gaussian_init(rng, n * input_dim, 0.01),
            bias: vec![0.0; n],
        })
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.weight.clone();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let (w, b) = flat.split_at(self.weight.len());
        self.weight.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }

    pub fn logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.input_dim {
            return Err(Error::shape(self.input_dim, f.len()));
        }
        Ok(self
            .weight
            .chunks(self.input_dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, f) + b)
            .collect())
    }

    fn index_of(&self, y: usize) -> Result<usize> {
        self.classes.binary_search(&y).map_err(|_| {
            Error::InvalidInput(format!("class {y} is not a seen class of the classifier"))
        })
    }

    /// `log softmax(W f + b)[y]`.
    pub fn phi_xy(&self, f: &[f64], y: usize) -> Result<f64> {
        let idx = self.index_of(y)?;
        let z = self.logits(f)?;
        Ok(z[idx] - log_sum_exp_unchecked(&z))
    }

    /// Potential, its gradient for the flat parameters, and for `f`.
    pub fn phi_xy_grad(&self, f: &[f64], y: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let idx = self.index_of(y)?;
        let z = self.logits(f)?;
        let lse = log_sum_exp_unchecked(&z);
        let d = self.input_dim;
        let n = self.classes.len();
        let mut grad = vec![0.0; self.num_params()];
        let mut grad_f = vec![0.0; d];
        for j in 0..n {
            let delta = f64::from(u8::from(j == idx)) - (z[j] - lse).exp();
            let row = &self.weight[j * d..(j + 1) * d];
            for k in 0..d {
                grad[j * d + k] = delta * f[k];
                grad_f[k] += delta * row[k];
            }
            grad[n * d + j] = delta;
        }
        Ok((z[idx] - lse, grad, grad_f))
    }

    /// Predicted seen class; ties go to the smallest id.
    pub fn predict(&self, f: &[f64]) -> Result<usize> {
        let z = self.logits(f)?;
        Ok(self.classes[argmax(&z)])
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Two affine layers with a ReLU between them, mapping `Π` to the semantic space.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMapper {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Hidden width used when none is configured.
pub const DEFAULT_HIDDEN: usize = 256;

struct MapperCache {
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl SemanticMapper {
    pub fn new(
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output_dim == 0 {
            return Err(Error::InvalidInput(
                "mapper dimensions must be positive".into(),
            ));
        }
        Ok(SemanticMapper {
            input_dim,
            hidden,
            output_dim,
            w1: gaussian_init(rng, hidden * input_dim, (2.0 / input_dim as f64).sqrt()),
            b1: vec![0.0; hidden],
            w2: gaussian_init(rng, output_dim * hidden, (1.0 / hidden as f64).sqrt()),
            b2: vec![0.0; output_dim],
        })
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let (w1, rest) = flat.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, b2) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2.copy_from_slice(b2);
    }

    fn forward_cached(&self, pi: &[f64]) -> Result<(Vec<f64>, MapperCache)> {
        if pi.len() != self.input_dim {
            return Err(Error::shape(self.input_dim, pi.len()));
        }
        let pre: Vec<f64> = self
            .w1
            .chunks(self.input_dim)
            .zip(&self.b1)
            .map(|(row, b)| dot(row, pi) + b)
            .collect();
        let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let out = self
            .w2
            .chunks(self.hidden)
            .zip(&self.b2)
            .map(|(row, b)| dot(row, &hidden) + b)
            .collect();
        Ok((out, MapperCache { pre, hidden }))
    }

    pub fn forward(&self, pi: &[f64]) -> Result<Vec<f64>> {
        self.forward_cached(pi).map(|(v, _)| v)
    }

    /// Gradient of a loss with `dL/dv = d_out` for the flat parameters.
    fn backward(&self, pi: &[f64], cache: &MapperCache, d_out: &[f64]) -> Vec<f64> {
        let (i, h) = (self.input_dim, self.hidden);
        let mut grad = vec![0.0; self.num_params()];
        let (g_w1, rest) = grad.split_at_mut(self.w1.len());
        let (g_b1, rest) = rest.split_at_mut(h);
        let (g_w2, g_b2) = rest.split_at_mut(self.w2.len());
        let mut d_hidden = vec![0.0; h];
        for (o, &d) in d_out.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g_b2[o] = d;
            let row = &self.w2[o * h..(o + 1) * h];
            for j in 0..h {
                g_w2[o * h + j] = d * cache.hidden[j];
                d_hidden[j] += d * row[j];
            }
        }
        for j in 0..h {
            if cache.pre[j] <= 0.0 || d_hidden[j] == 0.0 {
                continue;
            }
            g_b1[j] = d_hidden[j];
            for k in 0..i {
                g_w1[j * i + k] = d_hidden[j] * pi[k];
            }
        }
        grad
    }

    /// Semantic potential of `pi` for class `y` and its parameter gradient.
    pub fn phi_sx_grad(
        &self,
        pi: &[f64],
        y: usize,
        codebook: &[(usize, Vec<f64>)],
        hinge: HingeConfig,
    ) -> Result<(f64, Vec<f64>)> {
        let (v, cache) = self.forward_cached(pi)?;
        let (phi, d_v) = phi_sx_semantic(&v, y, codebook, hinge)?;
        Ok((phi, self.backward(pi, &cache, &d_v)))
    }

    pub fn quantize(&mut self) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            numerics::quantize(v);
        }
    }
}

/// Margin settings of the semantic hinge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HingeConfig {
    pub eta: f64,
    /// Also charge the margin on the correct class, a constant offset.
    pub margin_on_correct: bool,
}

impl Default for HingeConfig {
    fn default() -> Self {
        HingeConfig {
            eta: 0.2,
            margin_on_correct: false,
        }
    }
}

/// `-sum over y' of [η·1(y'≠y) + s_y'·v - s_y·v]_+` and its gradient in `v`.
///
/// `codebook` lists the candidate classes with their (already normalized)
/// vectors and must contain `y`.
pub fn phi_sx_semantic(
    v: &[f64],
    y: usize,
    codebook: &[(usize, Vec<f64>)],
    hinge: HingeConfig,
) -> Result<(f64, Vec<f64>)> {
    if hinge.eta < 0.0 {
        return Err(Error::InvalidInput("margin must be non-negative".into()));
    }
    let s_y = &codebook
        .iter()
        .find(|(c, _)| *c == y)
        .ok_or(Error::Coverage { missing: vec![y] })?
        .1;
    if s_y.len() != v.len() {
        return Err(Error::shape(s_y.len(), v.len()));
    }
    let true_score = dot(s_y, v);
    let mut phi = 0.0;
    let mut grad = vec![0.0; v.len()];
    for (c, s) in codebook {
        if *c == y {
            if hinge.margin_on_correct {
                phi -= hinge.eta;
            }
            continue;
        }
        let arg = hinge.eta + dot(s, v) - true_score;
        if arg > 0.0 {
            phi -= arg;
            for ((g, a), b) in grad.iter_mut().zip(s).zip(s_y) {
                *g -= a - b;
            }
        }
    }
    Ok((phi, grad))
}

/// `-||target - pi||_F²` and its gradient in `pi`.
pub fn phi_sx_visual(target: &[f64], pi: &[f64]) -> Result<(f64, Vec<f64>)> {
    if target.len() != pi.len() {
        return Err(Error::shape(target.len(), pi.len()));
    }
    let grad = target.iter().zip(pi).map(|(t, p)| 2.0 * (t - p)).collect();
    Ok((-sq_dist(target, pi), grad))
}

/// Class with the highest compatibility `s_y · v`; ties go to the smallest id.
pub fn predict_from_scores(v: &[f64], codebook: &[(usize, Vec<f64>)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, s) in codebook {
        if s.len() != v.len() {
            return Err(Error::shape(s.len(), v.len()));
        }
        let score = dot(s, v);
        if best.is_none_or(|(bc, bs)| score > bs || (score == bs && *c < bc)) {
            best = Some((*c, score));
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::InvalidInput("empty codebook".into()))
}

pub fn predict_semantic(
    mapper: &SemanticMapper,
    pi: &[f64],
    codebook: &[(usize, Vec<f64>)],
) -> Result<usize> {
    predict_from_scores(&mapper.forward(pi)?, codebook)
}

/// Class whose signature is nearest in Frobenius norm; ties go to the smallest id.
pub fn predict_visual(pi: &[f64], codebook: &[(usize, Vec<f64>)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, s) in codebook {
        if s.len() != pi.len() {
            return Err(Error::shape(s.len(), pi.len()));
        }
        let d = sq_dist(s, pi);
        if best.is_none_or(|(bc, bd)| d < bd || (d == bd && *c < bc)) {
            best = Some((*c, d));
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::InvalidInput("empty codebook".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub weight_decay: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 200,
            learning_rate: 1e-2,
            margin: 0.2,
            weight_decay: 1e-4,
        }
    }
}

/// Linear map from standardized raw features to the codebook space,
/// trained with the same hinge as the semantic potential.
#[derive(Clone, Debug, PartialEq)]
pub struct CompatibilityBaseline {
    pub input_dim: usize,
    pub output_dim: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Row-major `output_dim x input_dim`.
    pub map: Vec<f64>,
    pub margin: f64,
}

impl CompatibilityBaseline {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::shape(self.input_dim, x.len()));
        }
        let z = self.standardize(x);
        Ok(self
            .map
            .chunks(self.input_dim)
            .map(|row| dot(row, &z))
            .collect())
    }

    pub fn predict(&self, x: &[f64], codebook: &[(usize, Vec<f64>)]) -> Result<usize> {
        predict_from_scores(&self.embed(x)?, codebook)
    }

    pub fn quantize(&mut self) {
        for v in [&mut self.mean, &mut self.scale, &mut self.map] {
            numerics::quantize(v);
        }
    }
}

/// Trains the baseline on `(features, label)` pairs against `codebook`.
pub fn baseline_fit(
    inputs: &[(&[f64], usize)],
    codebook: &[(usize, Vec<f64>)],
    cfg: &BaselineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CompatibilityBaseline> {
    let d_in = inputs
        .first()
        .ok_or_else(|| Error::InvalidInput("no training inputs for the baseline".into()))?
        .0
        .len();
    let d_out = codebook
        .first()
        .ok_or_else(|| Error::InvalidInput("empty codebook".into()))?
        .1
        .len();
    let n = inputs.len() as f64;
    let mut mean = vec![0.0; d_in];
    for (x, _) in inputs {
        if x.len() != d_in {
            return Err(Error::shape(d_in, x.len()));
        }
        ensure_finite(x, "baseline input")?;
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d_in];
    for (x, _) in inputs {
        for ((s, v), m) in scale.iter_mut().zip(x.iter()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    scale.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
    let mut model = CompatibilityBaseline {
        input_dim: d_in,
        output_dim: d_out,
        mean,
        scale,
        map: gaussian_init(rng, d_out * d_in, 0.01 / (d_in as f64).sqrt()),
        margin: cfg.margin,
    };
    let z: Vec<Vec<f64>> = inputs.iter().map(|(x, _)| model.standardize(x)).collect();
    let hinge = HingeConfig {
        eta: cfg.margin,
        margin_on_correct: false,
    };
    let mut state = OptimizerState::new(
        model.map.len(),
        AdamConfig::with_learning_rate(cfg.learning_rate),
    );
    for _ in 0..cfg.epochs {
        let per: Vec<Result<Vec<f64>>> = par::map_range(inputs.len(), |i| {
            let v: Vec<f64> = model.map.chunks(d_in).map(|row| dot(row, &z[i])).collect();
            phi_sx_semantic(&v, inputs[i].1, codebook, hinge).map(|(_, g)| g)
        });
        let mut grad: Vec<f64> = model.map.iter().map(|w| cfg.weight_decay * w).collect();
        for (i, g) in per.into_iter().enumerate() {
            let g = g?;
            for (o, &go) in g.iter().enumerate() {
                if go != 0.0 {
                    let row = &mut grad[o * d_in..(o + 1) * d_in];
                    for (r, x) in row.iter_mut().zip(&z[i]) {
                        // Descend on the negated potential.
                        *r -= go * x / n;
                    }
                }
            }
        }
        numerics::adam_step(&mut model.map, &grad, &mut state)?;
    }
    Ok(model)
}
