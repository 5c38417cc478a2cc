//! Per-part isotropic Gaussian mixtures over part features.
//!
//! Each part `m` has `K` prototypes sharing one variance. EM fits them; the
//! posterior over prototypes of every part gives the `M x K` embedding `Π`.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::datamodel::{Codebook, CodebookKind};
use crate::numerics::{
    ensure_finite, gaussian_log_density_unchecked, log_sum_exp_unchecked, sq_dist,
};
use crate::{kmeans, nnls, par, Error, Result};

/// Mixture of one part.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePart {
    /// `prototypes[k]` has length `C`.
    pub prototypes: Vec<Vec<f64>>,
    pub priors: Vec<f64>,
    pub variance: f64,
}

impl MixturePart {
    pub fn new(prototypes: Vec<Vec<f64>>, priors: Vec<f64>, variance: f64) -> Result<Self> {
        let part = MixturePart {
            prototypes,
            priors,
            variance,
        };
        part.validate()?;
        Ok(part)
    }

    pub fn types(&self) -> usize {
        self.prototypes.len()
    }

    pub fn channels(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.prototypes.len();
        if k == 0 || self.priors.len() != k {
            return Err(Error::shape(format!("{k} priors"), self.priors.len()));
        }
        let c = self.channels();
        if c == 0 || self.prototypes.iter().any(|p| p.len() != c) {
            return Err(Error::InvalidInput(
                "prototypes must share a positive dimension".into(),
            ));
        }
        for p in &self.prototypes {
            ensure_finite(p, "prototype")?;
        }
        if !(self.variance.is_finite() && self.variance > 0.0) {
            return Err(Error::InvalidInput(format!(
                "variance must be positive, got {}",
                self.variance
            )));
        }
        if self.priors.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidInput("priors must be non-negative".into()));
        }
        let s: f64 = self.priors.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("priors sum to {s}, not 1")));
        }
        Ok(())
    }

    fn log_joint(&self, f: &[f64]) -> Vec<f64> {
        self.prototypes
            .iter()
            .zip(&self.priors)
            .map(|(theta, &p)| p.ln() + gaussian_log_density_unchecked(f, theta, self.variance))
            .collect()
    }

    /// Posterior over types; falls back to uniform (flagged) if nothing is finite.
    pub fn posterior(&self, f: &[f64]) -> (Vec<f64>, bool) {
        let lj = self.log_joint(f);
        let lse = log_sum_exp_unchecked(&lj);
        if !lse.is_finite() {
            return (vec![1.0 / self.types() as f64; self.types()], true);
        }
        let mut post: Vec<f64> = lj.iter().map(|v| (v - lse).exp()).collect();
        let s: f64 = post.iter().sum();
        post.iter_mut().for_each(|v| *v /= s);
        (post, false)
    }
}

/// Mixtures of all parts.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureModel {
    pub parts: Vec<MixturePart>,
}

impl MixtureModel {
    pub fn new(parts: Vec<MixturePart>) -> Result<Self> {
        let model = MixtureModel { parts };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .parts
            .first()
            .ok_or_else(|| Error::InvalidInput("mixture model without parts".into()))?;
        for p in &self.parts {
            p.validate()?;
            if p.types() != first.types() || p.channels() != first.channels() {
                return Err(Error::InvalidInput("parts must share K and C".into()));
            }
        }
        Ok(())
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn types(&self) -> usize {
        self.parts[0].types()
    }

    pub fn channels(&self) -> usize {
        self.parts[0].channels()
    }

    pub fn quantize(&mut self) {
        for p in &mut self.parts {
            for theta in &mut p.prototypes {
                crate::numerics::quantize(theta);
            }
            crate::numerics::quantize(&mut p.priors);
            let s: f64 = p.priors.iter().sum();
            p.priors.iter_mut().for_each(|v| *v /= s);
            p.variance = p.variance as f32 as f64;
        }
    }
}

/// Negative log-likelihood of one part feature under a part mixture.
pub fn mixture_nll(part: &MixturePart, f: &[f64]) -> Result<f64> {
    if f.len() != part.channels() {
        return Err(Error::shape(part.channels(), f.len()));
    }
    ensure_finite(f, "part feature")?;
    if part.priors.iter().all(|p| *p == 0.0) {
        return Err(Error::InvalidInput("all mixture priors are zero".into()));
    }
    Ok(-log_sum_exp_unchecked(&part.log_joint(f)))
}

/// Quality flags attached to an embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PiFlags {
    /// Some row had no finite posterior mass and was set to uniform.
    pub underflow: bool,
    /// The nonnegative solver hit its iteration cap.
    pub not_converged: bool,
    /// Some nonnegative solution was all zero and was set to uniform.
    pub degenerate: bool,
}

/// Posterior type scores of one instance, `M x K` or flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct PiEmbedding {
    parts: usize,
    types: usize,
    values: Vec<f64>,
    flat: bool,
    pub flags: PiFlags,
}

impl PiEmbedding {
    /// Structured embedding from row-major `M x K` values.
    pub fn structured(parts: usize, types: usize, values: Vec<f64>) -> Result<Self> {
        let pi = PiEmbedding {
            parts,
            types,
            values,
            flat: false,
            flags: PiFlags::default(),
        };
        pi.validate()?;
        Ok(pi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 || self.types == 0 || self.values.len() != self.parts * self.types {
            return Err(Error::shape(
                format!("{}x{} embedding", self.parts, self.types),
                self.values.len(),
            ));
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput(
                "embedding entries must be non-negative".into(),
            ));
        }
        let sums: Vec<f64> = if self.flat {
            vec![self.values.iter().sum()]
        } else {
            self.values
                .chunks(self.types)
                .map(|r| r.iter().sum())
                .collect()
        };
        if sums.iter().any(|s| (s - 1.0).abs() > 1e-6) {
            return Err(Error::InvalidInput(format!(
                "embedding not stochastic: {sums:?}"
            )));
        }
        Ok(())
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn types(&self) -> usize {
        self.types
    }

    pub fn is_flat(&self) -> bool {
        self.flat
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.types..(m + 1) * self.types]
    }
}

/// Row-major concatenation divided by `M`.
pub fn flatten_pi(pi: &PiEmbedding) -> PiEmbedding {
    if pi.flat {
        return pi.clone();
    }
    let m = pi.parts as f64;
    PiEmbedding {
        values: pi.values.iter().map(|v| v / m).collect(),
        flat: true,
        ..pi.clone()
    }
}

fn check_part_features(model: &MixtureModel, f: &[f64]) -> Result<()> {
    let (m, c) = (model.num_parts(), model.channels());
    if f.len() != m * c {
        return Err(Error::shape(format!("{m}x{c} part features"), f.len()));
    }
    ensure_finite(f, "part features")
}

/// Bayesian posterior embedding of `M x C` part features.
pub fn infer_pi(model: &MixtureModel, f: &[f64]) -> Result<PiEmbedding> {
    check_part_features(model, f)?;
    let c = model.channels();
    let mut values = Vec::with_capacity(model.num_parts() * model.types());
    let mut flags = PiFlags::default();
    for (m, part) in model.parts.iter().enumerate() {
        let (post, under) = part.posterior(&f[m * c..(m + 1) * c]);
        flags.underflow |= under;
        values.extend(post);
    }
    Ok(PiEmbedding {
        parts: model.num_parts(),
        types: model.types(),
        values,
        flat: false,
        flags,
    })
}

/// Embedding of many instances, in input order.
pub fn infer_pi_batch(model: &MixtureModel, features: &[&[f64]]) -> Result<Vec<PiEmbedding>> {
    par::map(features, |f| infer_pi(model, f))
        .into_iter()
        .collect()
}

/// Iteration cap of the nonnegative solver.
pub const NNLS_MAX_ITER: usize = 500;

/// Embedding from nonnegative least squares `min ||Θ_m π - f_m||`, rows
/// renormalized to sum to one.
pub fn infer_pi_nnls(model: &MixtureModel, f: &[f64]) -> Result<PiEmbedding> {
    check_part_features(model, f)?;
    let (c, k) = (model.channels(), model.types());
    let mut values = Vec::with_capacity(model.num_parts() * k);
    let mut flags = PiFlags::default();
    for (m, part) in model.parts.iter().enumerate() {
        let sol = nnls::nnls(
            &part.prototypes,
            &f[m * c..(m + 1) * c],
            NNLS_MAX_ITER.max(3 * k),
        );
        flags.not_converged |= !sol.converged;
        let s: f64 = sol.x.iter().sum();
        if s > 1e-12 {
            values.extend(sol.x.iter().map(|v| v / s));
        } else {
            flags.degenerate = true;
            values.extend(std::iter::repeat_n(1.0 / k as f64, k));
        }
    }
    Ok(PiEmbedding {
        parts: model.num_parts(),
        types: k,
        values,
        flat: false,
        flags,
    })
}

/// Class-averaged embeddings as a visual codebook, rows renormalized.
pub fn class_average_pi(items: &[(usize, &PiEmbedding)], classes: &[usize]) -> Result<Codebook> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidInput("no embeddings to average".into()))?
        .1;
    let (parts, types, flat) = (first.parts, first.types, first.flat);
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = classes
        .iter()
        .map(|&c| (c, (vec![0.0; parts * types], 0)))
        .collect();
    for (class, pi) in items {
        if pi.parts != parts || pi.types != types || pi.flat != flat {
            return Err(Error::shape(
                format!("{parts}x{types} embeddings"),
                format!("{}x{}", pi.parts, pi.types),
            ));
        }
        if let Some((acc, n)) = sums.get_mut(class) {
            for (a, v) in acc.iter_mut().zip(&pi.values) {
                *a += v;
            }
            *n += 1;
        }
    }
    let mut entries = BTreeMap::new();
    for (class, (mut acc, n)) in sums {
        if n == 0 {
            return Err(Error::InvalidInput(format!(
                "class {class} has no embeddings"
            )));
        }
        let row_len = if flat { parts * types } else { types };
        for row in acc.chunks_mut(row_len) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        entries.insert(class, acc);
    }
    if flat {
        Codebook::new(CodebookKind::VisualFlat, vec![parts * types], entries)
    } else {
        Codebook::new(CodebookKind::VisualStructured, vec![parts, types], entries)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_steps: usize,
    /// Stop once the mean NLL changes by less than this.
    pub tol: f64,
    /// Number of k-means++ seedings EM runs from; the lowest final NLL wins.
    pub n_init: usize,
    /// Lower bound on the shared variance.
    pub variance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_steps: 300,
            tol: 1e-6,
            n_init: 10,
            variance_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmTrace {
    /// Mean NLL of the starting parameters.
    pub initial_nll: f64,
    /// Mean NLL after each EM step.
    pub nll: Vec<f64>,
    /// `(step, component)` pairs re-seeded after losing all responsibility.
    pub reseeded: Vec<(usize, usize)>,
    pub converged: bool,
}

impl EmTrace {
    pub fn steps(&self) -> usize {
        self.nll.len()
    }

    pub fn final_nll(&self) -> f64 {
        self.nll.last().copied().unwrap_or(self.initial_nll)
    }

    /// Largest increase between consecutive NLL values, starting values included.
    pub fn max_increase(&self) -> f64 {
        let mut prev = self.initial_nll;
        let mut worst = f64::NEG_INFINITY;
        for &v in &self.nll {
            worst = worst.max(v - prev);
            prev = v;
        }
        worst
    }
}

fn check_features(features: &[&[f64]], k: usize) -> Result<usize> {
    let c = features
        .first()
        .ok_or_else(|| Error::InvalidInput("no features for EM".into()))?
        .len();
    if c == 0 {
        return Err(Error::InvalidInput("EM features have no channels".into()));
    }
    if features.len() < k {
        return Err(Error::InvalidInput(format!(
            "EM needs at least {k} samples, got {}",
            features.len()
        )));
    }
    for f in features {
        if f.len() != c {
            return Err(Error::shape(c, f.len()));
        }
        ensure_finite(f, "EM feature")?;
    }
    Ok(c)
}

/// Responsibilities and mean NLL.
fn e_step(part: &MixturePart, features: &[&[f64]]) -> (Vec<Vec<f64>>, f64) {
    let c = part.channels() as f64;
    let offset: Vec<f64> = part
        .priors
        .iter()
        .map(|p| p.ln() - 0.5 * c * (2.0 * std::f64::consts::PI * part.variance).ln())
        .collect();
    let scale = 1.0 / (2.0 * part.variance);
    let rows: Vec<(Vec<f64>, f64)> = par::map(features, |f| {
        let mut lj: Vec<f64> = part
            .prototypes
            .iter()
            .zip(&offset)
            .map(|(theta, o)| o - sq_dist(f, theta) * scale)
            .collect();
        let lse = log_sum_exp_unchecked(&lj);
        lj.iter_mut().for_each(|v| *v = (*v - lse).exp());
        (lj, -lse)
    });
    let n = rows.len() as f64;
    let mut nll = 0.0;
    let mut resp = Vec::with_capacity(rows.len());
    for (r, l) in rows {
        nll += l;
        resp.push(r);
    }
    (resp, nll / n)
}

/// Maximization step from given responsibilities (`n x K`).
///
/// Components with no responsibility are moved to the sample worst explained
/// by the others; their indices are returned.
pub fn m_step(
    features: &[&[f64]],
    resp: &[Vec<f64>],
    variance_floor: f64,
) -> Result<(MixturePart, Vec<usize>)> {
    let k = resp.first().map_or(0, Vec::len);
    let c = check_features(features, 1)?;
    if k == 0 || resp.len() != features.len() || resp.iter().any(|r| r.len() != k) {
        return Err(Error::shape(
            format!("{} x K responsibilities", features.len()),
            resp.len(),
        ));
    }
    let n = features.len() as f64;
    let mut weight = vec![0.0; k];
    let mut sums = vec![vec![0.0; c]; k];
    for (f, r) in features.iter().zip(resp) {
        for j in 0..k {
            if r[j] != 0.0 {
                weight[j] += r[j];
                for (s, v) in sums[j].iter_mut().zip(f.iter()) {
                    *s += r[j] * v;
                }
            }
        }
    }
    let mut empty = Vec::new();
    let mut prototypes = Vec::with_capacity(k);
    for j in 0..k {
        if weight[j] < 1e-12 {
            empty.push(j);
            prototypes.push(vec![0.0; c]);
        } else {
            prototypes.push(sums[j].iter().map(|s| s / weight[j]).collect::<Vec<f64>>());
        }
    }
    let live: Vec<usize> = (0..k).filter(|j| !empty.contains(j)).collect();
    for &j in &empty {
        // Farthest sample from every live prototype.
        let mut best = (0, f64::NEG_INFINITY);
        for (i, f) in features.iter().enumerate() {
            let d = live
                .iter()
                .map(|&l| sq_dist(f, &prototypes[l]))
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        prototypes[j] = features[best.0].to_vec();
        weight[j] = 1.0;
    }
    let mut sq = 0.0;
    for (f, r) in features.iter().zip(resp) {
        for j in live.iter().copied() {
            if r[j] != 0.0 {
                sq += r[j] * sq_dist(f, &prototypes[j]);
            }
        }
    }
    let total: f64 = weight.iter().sum();
    let priors = weight.iter().map(|w| w / total).collect();
    let variance = (sq / (n * c as f64)).max(variance_floor);
    Ok((
        MixturePart {
            prototypes,
            priors,
            variance,
        },
        empty,
    ))
}

fn hard_start(
    features: &[&[f64]],
    centers: Vec<Vec<f64>>,
    labels: &[usize],
    floor: f64,
) -> Result<MixturePart> {
    let k = centers.len();
    let resp: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| {
            let mut r = vec![0.0; k];
            r[l] = 1.0;
            r
        })
        .collect();
    let (mut part, _) = m_step(features, &resp, floor)?;
    for (p, c) in part.prototypes.iter_mut().zip(centers) {
        if p.iter().all(|v| *v == 0.0) {
            *p = c;
        }
    }
    Ok(part)
}

/// Fits a `K`-component mixture from k-means++ seeds.
pub fn em_fit(
    features: &[&[f64]],
    k: usize,
    cfg: &EmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MixturePart, EmTrace)> {
    if k == 0 {
        return Err(Error::InvalidInput("K must be positive".into()));
    }
    let c = check_features(features, k)?;
    let packed = pack(features);
    let features: Vec<&[f64]> = packed.chunks_exact(c).collect();
    let features = &features[..];
    let mut best: Option<(MixturePart, EmTrace)> = None;
    for _ in 0..cfg.n_init.max(1) {
        let (centers, labels, _) = kmeans::kmeans(features, k, 20, rng);
        let start = hard_start(features, centers, &labels, cfg.variance_floor)?;
        let run = em_run(start, features, cfg)?;
        if best
            .as_ref()
            .is_none_or(|b| run.1.final_nll() < b.1.final_nll())
        {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one seeding"))
}

/// Runs EM from an existing part mixture.
pub fn em_refine(
    start: &MixturePart,
    features: &[&[f64]],
    cfg: &EmConfig,
) -> Result<(MixturePart, EmTrace)> {
    start.validate()?;
    let c = check_features(features, start.types())?;
    if c != start.channels() {
        return Err(Error::shape(start.channels(), c));
    }
    let packed = pack(features);
    let features: Vec<&[f64]> = packed.chunks_exact(c).collect();
    em_run(start.clone(), &features, cfg)
}

/// Copies rows into one buffer; rows sliced out of wider vectors are
/// otherwise scattered across the heap.
fn pack(features: &[&[f64]]) -> Vec<f64> {
    features.iter().flat_map(|f| f.iter().copied()).collect()
}

fn em_run(
    mut part: MixturePart,
    features: &[&[f64]],
    cfg: &EmConfig,
) -> Result<(MixturePart, EmTrace)> {
    let (mut resp, mut nll) = e_step(&part, features);
    let mut trace = EmTrace {
        initial_nll: nll,
        ..Default::default()
    };
    for step in 1..=cfg.max_steps {
        let (next, empty) = m_step(features, &resp, cfg.variance_floor)?;
        trace.reseeded.extend(empty.into_iter().map(|j| (step, j)));
        part = next;
        let (r, new_nll) = e_step(&part, features);
        resp = r;
        trace.nll.push(new_nll);
        let delta = (nll - new_nll).abs();
        nll = new_nll;
        if !nll.is_finite() {
            return Err(Error::NonFinite(format!(
                "EM negative log-likelihood at step {step}"
            )));
        }
        if delta < cfg.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((part, trace))
}

/// Mean NLL of `features` under `part`.
pub fn mean_nll(part: &MixturePart, features: &[&[f64]]) -> f64 {
    e_step(part, features).1
}

/// Gradient of a loss on one posterior row with respect to the prototypes of
/// that part (`K x C`, row-major), given `d_pi = dL/dπ`.
pub fn posterior_prototype_grad(part: &MixturePart, f: &[f64], d_pi: &[f64]) -> Vec<f64> {
    let (post, _) = part.posterior(f);
    let mean: f64 = post.iter().zip(d_pi).map(|(p, d)| p * d).sum();
    let c = part.channels();
    let mut grad = Vec::with_capacity(part.types() * c);
    for (k, theta) in part.prototypes.iter().enumerate() {
        let dl = post[k] * (d_pi[k] - mean);
        grad.extend(
            f.iter()
                .zip(theta)
                .map(|(x, t)| dl * (x - t) / part.variance),
        );
    }
    grad
}

/// Assignment `a` minimizing `sum_i cost[i][a[i]]` over permutations.
/// Exhaustive up to 8 rows, greedy beyond.
pub fn best_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n <= 8 {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = (f64::INFINITY, perm.clone());
        permutations(&mut perm, 0, &mut |p| {
            let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            if total < best.0 {
                best = (total, p.to_vec());
            }
        });
        return best.1;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for (i, row) in cost.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            pairs.push((v, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (_, i, j) in pairs {
        if out[i] == usize::MAX && !used[j] {
            out[i] = j;
            used[j] = true;
        }
    }
    out
}

fn permutations(p: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permutations(p, start + 1, visit);
        p.swap(start, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn part(protos: Vec<Vec<f64>>, priors: Vec<f64>, var: f64) -> MixturePart {
        MixturePart::new(protos, priors, var).unwrap()
    }

    #[test]
    fn nll_single_component_at_mean() {
        let p = part(vec![vec![0.4]], vec![1.0], 1.0);
        assert!((mixture_nll(&p, &[0.4]).unwrap() - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn duplicate_component_leaves_nll_unchanged() {
        let a = part(vec![vec![0.0, 1.0], vec![2.0, -1.0]], vec![0.3, 0.7], 0.8);
        let b = part(
            vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![2.0, -1.0]],
            vec![0.3, 0.35, 0.35],
            0.8,
        );
        let f = [0.7, 0.2];
        assert!((mixture_nll(&a, &f).unwrap() - mixture_nll(&b, &f).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let k = rng.random_range(1..5);
            let c = rng.random_range(1..4);
            let protos: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let mut priors: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = priors.iter().sum();
            priors.iter_mut().for_each(|v| *v /= s);
            let var = rng.random_range(0.5..2.0);
            let f: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = part(protos.clone(), priors.clone(), var);
            let mut direct = 0.0;
            for (theta, pr) in protos.iter().zip(&priors) {
                let d2: f64 = f.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum();
                direct += pr
                    * (2.0 * std::f64::consts::PI * var).powf(-(c as f64) / 2.0)
                    * (-d2 / (2.0 * var)).exp();
            }
            assert!((mixture_nll(&p, &f).unwrap() + direct.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn all_zero_priors_rejected() {
        let p = MixturePart {
            prototypes: vec![vec![0.0]],
            priors: vec![0.0],
            variance: 1.0,
        };
        assert!(mixture_nll(&p, &[0.0]).is_err());
    }

    #[test]
    fn em_single_component_closed_form() {
        let data: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0, 0.0], vec![2.0, 4.0]];
        let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, trace) = em_fit(&refs, 1, &EmConfig::default(), &mut rng).unwrap();
        assert_eq!(p.prototypes[0], vec![2.0, 2.0]);
        let msd = (1.0 + 0.0 + 1.0 + 4.0 + 0.0 + 4.0) / 3.0;
        assert!((p.variance - msd / 2.0).abs() < 1e-12);
        assert!(trace.steps() <= 2);
    }

    #[test]
    fn em_is_monotone_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let centre = (i % 3) as f64 * 1.5;
                vec![
                    centre + rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let run = || {
            em_fit(
                &refs,
                3,
                &EmConfig::default(),
                &mut ChaCha8Rng::seed_from_u64(3),
            )
            .unwrap()
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(ta.max_increase() <= 1e-9);
        assert!(ta.steps() <= 300);
    }

    #[test]
    fn warm_start_at_optimum_stops_quickly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<Vec<f64>> = (0..100)
            .map(|i| vec![(i % 2) as f64 * 8.0 + rng.random_range(-1.0..1.0)])
            .collect();
        let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let (p, _) = em_fit(
            &refs,
            2,
            &EmConfig {
                tol: 1e-12,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let (q, trace) = em_refine(&p, &refs, &EmConfig::default()).unwrap();
        assert!(trace.steps() <= 2);
        assert!(trace.final_nll() <= trace.initial_nll + 1e-9);
        assert!(sq_dist(&p.prototypes[0], &q.prototypes[0]) < 1e-8);
    }

    #[test]
    fn empty_component_is_reseeded() {
        let data: Vec<Vec<f64>> = vec![vec![0.0], vec![0.1], vec![10.0]];
        let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let resp = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let (p, empty) = m_step(&refs, &resp, 1e-8).unwrap();
        assert_eq!(empty, vec![1]);
        assert_eq!(p.prototypes[1], vec![10.0]);
    }

    fn two_point_model() -> MixtureModel {
        MixtureModel::new(vec![part(vec![vec![0.0], vec![2.0]], vec![0.5, 0.5], 1.0)]).unwrap()
    }

    #[test]
    fn posterior_examples() {
        let single = MixtureModel::new(vec![part(vec![vec![3.0]], vec![1.0], 1.0)]).unwrap();
        assert_eq!(infer_pi(&single, &[-4.0]).unwrap().values(), &[1.0]);
        let m = two_point_model();
        let mid = infer_pi(&m, &[1.0]).unwrap();
        assert!((mid.values()[0] - 0.5).abs() < 1e-15);
        let pi = infer_pi(&m, &[0.0]).unwrap();
        let e = (-2.0f64).exp();
        assert!((pi.values()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((pi.values()[0] - 0.8808).abs() < 5e-5);
        assert!((pi.values()[1] - 0.1192).abs() < 5e-5);
    }

    #[test]
    fn far_features_do_not_underflow() {
        let m = two_point_model();
        let pi = infer_pi(&m, &[1e6]).unwrap();
        assert_eq!(pi.values(), &[0.0, 1.0]);
        assert!(!pi.flags.underflow);
        pi.validate().unwrap();
    }

    #[test]
    fn nnls_examples() {
        let protos = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let m = MixtureModel::new(vec![part(protos, vec![1.0 / 3.0; 3], 1.0)]).unwrap();
        let pi = infer_pi_nnls(&m, &[0.0, 2.0, 0.0]).unwrap();
        assert_eq!(pi.values(), &[0.0, 1.0, 0.0]);
        let pi = infer_pi_nnls(&m, &[-1.0, -1.0, -1.0]).unwrap();
        assert!(pi.flags.degenerate);
        assert_eq!(pi.values(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn averaging_and_flattening() {
        let a = PiEmbedding::structured(1, 2, vec![1.0, 0.0]).unwrap();
        let b = PiEmbedding::structured(1, 2, vec![0.0, 1.0]).unwrap();
        let cb = class_average_pi(&[(0, &a), (0, &b), (1, &a)], &[0, 1]).unwrap();
        assert_eq!(cb.get(0).unwrap(), &[0.5, 0.5]);
        assert_eq!(cb.get(1).unwrap(), &[1.0, 0.0]);
        assert!(class_average_pi(&[(0, &a)], &[0, 1]).is_err());

        let two = PiEmbedding::structured(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let flat = flatten_pi(&two);
        assert_eq!(flat.values(), &[0.5, 0.0, 0.0, 0.5]);
        assert!(flat.is_flat());
        flat.validate().unwrap();
        assert_eq!(flatten_pi(&a).values(), a.values());
    }

    #[test]
    fn prototype_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let protos: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let p = part(protos, vec![0.2, 0.3, 0.5], 0.7);
        let f = [0.3, -0.2];
        let target = [0.1, 0.6, 0.3];
        let loss = |pp: &MixturePart| -> f64 {
            let (post, _) = pp.posterior(&f);
            post.iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let (post, _) = p.posterior(&f);
        let d_pi: Vec<f64> = post
            .iter()
            .zip(&target)
            .map(|(a, b)| 2.0 * (a - b))
            .collect();
        let grad = posterior_prototype_grad(&p, &f, &d_pi);
        let flat: Vec<f64> = p.prototypes.iter().flatten().copied().collect();
        let err = check_gradient(
            |x| {
                let mut q = p.clone();
                for (k, theta) in q.prototypes.iter_mut().enumerate() {
                    theta.copy_from_slice(&x[k * 2..k * 2 + 2]);
                }
                loss(&q)
            },
            &flat,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn assignment_finds_permutation() {
        let cost = vec![
            vec![5.0, 1.0, 9.0],
            vec![1.0, 5.0, 9.0],
            vec![9.0, 9.0, 0.0],
        ];
        assert_eq!(best_assignment(&cost), vec![1, 0, 2]);
        let big: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                (0..10)
                    .map(|j| if j == (i + 3) % 10 { 0.0 } else { 1.0 })
                    .collect()
            })
            .collect();
        assert_eq!(
            best_assignment(&big),
            (0..10).map(|i| (i + 3) % 10).collect::<Vec<_>>()
        );
    }

    proptest! {
        #[test]
        fn posterior_rows_are_stochastic(
            f in proptest::collection::vec(-50.0f64..50.0, 4),
            var in 0.01f64..10.0,
        ) {
            let m = MixtureModel::new(vec![
                part(vec![vec![0.0, 1.0], vec![3.0, -2.0], vec![-5.0, 0.5]], vec![0.2, 0.5, 0.3], var),
                part(vec![vec![1.0, 1.0], vec![-1.0, 4.0], vec![0.0, 0.0]], vec![0.6, 0.1, 0.3], var),
            ]).unwrap();
            let pi = infer_pi(&m, &f).unwrap();
            prop_assert!(pi.validate().is_ok());
        }

        #[test]
        fn posterior_ignores_prior_scale(x in -5.0f64..5.0, s in 0.01f64..100.0) {
            let a = part(vec![vec![0.0], vec![1.0]], vec![0.25, 0.75], 1.0);
            let scaled = MixturePart { priors: vec![0.25 * s, 0.75 * s], ..a.clone() };
            let (pa, _) = a.posterior(&[x]);
            let (pb, _) = scaled.posterior(&[x]);
            prop_assert!((pa[0] - pb[0]).abs() < 1e-12);
        }
    }
}
