//! Channel-grouping multi-attention.
//!
//! A grouping model turns the pooled channel means of a `W x H x C` feature
//! map into `M` channel-weight vectors. Each vector scores every cell, a
//! sigmoid turns the scores into an attention map, and the attention-weighted
//! spatial sums of the channels give the part features. The part-learning
//! loss keeps each map compact around its peak and away from the others.

use rand_chacha::ChaCha8Rng;

use crate::datamodel::InstanceInput;
use crate::kmeans;
use crate::numerics::{sigmoid, Tensor};
use crate::{par, Error, Result};

/// `g[m][c] = weight[m][c] * pool(E)[c] + bias[m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupingModel {
    parts: usize,
    channels: usize,
    /// Row-major `M x C`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GroupingModel {
    pub fn zeros(parts: usize, channels: usize) -> Result<Self> {
        if parts < 2 {
            return Err(Error::InvalidInput(format!(
                "grouping needs at least 2 parts, got {parts}"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidInput("grouping needs channels".into()));
        }
        Ok(GroupingModel {
            parts,
            channels,
            weight: vec![0.0; parts * channels],
            bias: vec![0.0; parts],
        })
    }

    pub fn from_params(
        parts: usize,
        channels: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let mut g = GroupingModel::zeros(parts, channels)?;
        if weight.len() != parts * channels || bias.len() != parts {
            return Err(Error::shape(
                format!("{}x{} weight and {} bias", parts, channels, parts),
                format!("{} weight and {} bias values", weight.len(), bias.len()),
            ));
        }
        crate::numerics::ensure_finite(&weight, "grouping weight")?;
        crate::numerics::ensure_finite(&bias, "grouping bias")?;
        g.weight = weight;
        g.bias = bias;
        Ok(g)
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn channels(&self) -> usize {
        self.channels
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

    /// Reorders parts so that new part `i` is old part `order[i]`.
    pub fn permute_parts(&mut self, order: &[usize]) {
        let c = self.channels;
        let weight = order
            .iter()
            .flat_map(|&o| self.weight[o * c..(o + 1) * c].to_vec())
            .collect();
        let bias = order.iter().map(|&o| self.bias[o]).collect();
        self.weight = weight;
        self.bias = bias;
    }

    pub fn quantize(&mut self) {
        crate::numerics::quantize(&mut self.weight);
        crate::numerics::quantize(&mut self.bias);
    }
}

/// Attended parts of one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct PartSet {
    /// Row-major `M x C`.
    pub features: Vec<f64>,
    /// Row-major `M x (W*H)`.
    pub attention: Vec<f64>,
    pub dims: (usize, usize, usize),
}

fn map_dims(feature_map: &Tensor) -> Result<(usize, usize, usize)> {
    match feature_map.dims() {
        &[w, h, c] => Ok((w, h, c)),
        d => Err(Error::shape("W x H x C feature map", format!("{d:?}"))),
    }
}

/// Global average pool over the spatial grid.
pub fn pool(feature_map: &Tensor) -> Result<Vec<f64>> {
    let (w, h, c) = map_dims(feature_map)?;
    let mut p = vec![0.0; c];
    for cell in feature_map.data().chunks(c) {
        for (acc, v) in p.iter_mut().zip(cell) {
            *acc += v;
        }
    }
    let n = (w * h) as f64;
    p.iter_mut().for_each(|v| *v /= n);
    Ok(p)
}

pub fn compute_grouping(model: &GroupingModel, feature_map: &Tensor) -> Result<Vec<f64>> {
    let (_, _, c) = map_dims(feature_map)?;
    if c != model.channels {
        return Err(Error::shape(format!("{} channels", model.channels), c));
    }
    let p = pool(feature_map)?;
    Ok(grouping_from_pool(model, &p))
}

fn grouping_from_pool(model: &GroupingModel, p: &[f64]) -> Vec<f64> {
    let c = model.channels;
    (0..model.parts * c)
        .map(|i| model.weight[i] * p[i % c] + model.bias[i / c])
        .collect()
}

/// Sigmoid of the channel-weighted sum at every cell, row-major over `(w, h)`.
pub fn attention_map(weights: &[f64], feature_map: &Tensor) -> Result<Vec<f64>> {
    let (_, _, c) = map_dims(feature_map)?;
    if weights.len() != c {
        return Err(Error::shape(format!("{c} channel weights"), weights.len()));
    }
    Ok(feature_map
        .data()
        .chunks(c)
        .map(|cell| sigmoid(crate::numerics::dot(weights, cell)))
        .collect())
}

/// `f[m][c] = sum over cells of A[m] * E[c]`.
pub fn part_features(attention: &[f64], feature_map: &Tensor) -> Result<Vec<f64>> {
    let (w, h, c) = map_dims(feature_map)?;
    let cells = w * h;
    if attention.is_empty() || !attention.len().is_multiple_of(cells) {
        return Err(Error::shape(
            format!("multiple of {cells} attention values"),
            attention.len(),
        ));
    }
    let parts = attention.len() / cells;
    let mut f = vec![0.0; parts * c];
    for m in 0..parts {
        let a = &attention[m * cells..(m + 1) * cells];
        let fm = &mut f[m * c..(m + 1) * c];
        for (cell, &am) in feature_map.data().chunks(c).zip(a) {
            for (acc, e) in fm.iter_mut().zip(cell) {
                *acc += am * e;
            }
        }
    }
    Ok(f)
}

pub fn forward(model: &GroupingModel, feature_map: &Tensor) -> Result<PartSet> {
    let dims = map_dims(feature_map)?;
    let g = compute_grouping(model, feature_map)?;
    let c = dims.2;
    let mut attention = Vec::with_capacity(model.parts * dims.0 * dims.1);
    for m in 0..model.parts {
        attention.extend(attention_map(&g[m * c..(m + 1) * c], feature_map)?);
    }
    let features = part_features(&attention, feature_map)?;
    Ok(PartSet {
        features,
        attention,
        dims,
    })
}

/// Part features of an instance: attention over a feature map, or the
/// given features of a part set (no grouping model needed).
pub fn instance_features(
    grouping: Option<&GroupingModel>,
    input: &InstanceInput,
) -> Result<Vec<f64>> {
    match (input, grouping) {
        (InstanceInput::FeatureMap(map), Some(g)) => Ok(forward(g, map)?.features),
        (InstanceInput::FeatureMap(_), None) => Err(Error::InvalidInput(
            "feature map input needs a grouping model".into(),
        )),
        (InstanceInput::PartSet(t), _) => Ok(t.data().to_vec()),
    }
}

/// Peak cell of a map; ties go to the smallest row-major index.
pub fn peak(a: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in a.iter().enumerate() {
        if *v > a[best] {
            best = i;
        }
    }
    best
}

fn sq_cell_dist(i: usize, j: usize, height: usize) -> f64 {
    let (wi, hi) = ((i / height) as f64, (i % height) as f64);
    let (wj, hj) = ((j / height) as f64, (j % height) as f64);
    (wi - wj).powi(2) + (hi - hj).powi(2)
}

/// Compactness loss of one `W x H` map (row-major, `height` cells per row).
pub fn loss_dis(a: &[f64], height: usize) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let p = peak(a);
    a.iter()
        .enumerate()
        .map(|(i, v)| v * sq_cell_dist(i, p, height))
        .sum()
}

/// Index of the largest competitor of part `m` at `cell` (smallest index on ties).
fn competitor(a: &[f64], parts: usize, cells: usize, m: usize, cell: usize) -> usize {
    let mut best = usize::MAX;
    for n in (0..parts).filter(|&n| n != m) {
        if best == usize::MAX || a[n * cells + cell] > a[best * cells + cell] {
            best = n;
        }
    }
    best
}

/// Diversity loss of part `m` against the other maps in `a` (`parts x cells`).
pub fn loss_div(a: &[f64], parts: usize, m: usize, zeta: f64) -> Result<f64> {
    if parts < 2 || !a.len().is_multiple_of(parts) || m >= parts {
        return Err(Error::InvalidInput(format!(
            "diversity loss needs at least two maps and a valid part index (parts {parts}, m {m})"
        )));
    }
    let cells = a.len() / parts;
    Ok((0..cells)
        .map(|i| {
            let n = competitor(a, parts, cells, m, i);
            a[m * cells + i] * (a[n * cells + i] - zeta)
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartLossWeights {
    pub lambda: f64,
    pub zeta: f64,
}

impl Default for PartLossWeights {
    fn default() -> Self {
        PartLossWeights {
            lambda: 5.0,
            zeta: 0.02,
        }
    }
}

/// Part-learning loss of stacked maps and its gradient with respect to them.
/// Peaks and competitor selections are held fixed.
pub fn loss_prt_with_grad(
    a: &[f64],
    parts: usize,
    height: usize,
    weights: PartLossWeights,
) -> Result<(f64, Vec<f64>)> {
    if parts < 2 || !a.len().is_multiple_of(parts) {
        return Err(Error::InvalidInput(format!(
            "bad attention stack for {parts} parts"
        )));
    }
    let cells = a.len() / parts;
    let mut grad = vec![0.0; a.len()];
    let mut loss = 0.0;
    for m in 0..parts {
        let am = &a[m * cells..(m + 1) * cells];
        let p = peak(am);
        for i in 0..cells {
            let d = sq_cell_dist(i, p, height);
            loss += am[i] * d;
            grad[m * cells + i] += d;
            let n = competitor(a, parts, cells, m, i);
            let other = a[n * cells + i];
            loss += weights.lambda * am[i] * (other - weights.zeta);
            grad[m * cells + i] += weights.lambda * (other - weights.zeta);
            grad[n * cells + i] += weights.lambda * am[i];
        }
    }
    Ok((loss, grad))
}

pub fn loss_prt(a: &[f64], parts: usize, height: usize, weights: PartLossWeights) -> Result<f64> {
    loss_prt_with_grad(a, parts, height, weights).map(|(l, _)| l)
}

/// Backpropagates `d_attention` (`M x cells`) and `d_features` (`M x C`)
/// through the attention maps and the grouping layer. Returns the gradient in
/// [`GroupingModel::flat_params`] order.
pub fn backward(
    model: &GroupingModel,
    feature_map: &Tensor,
    parts: &PartSet,
    d_attention: Option<&[f64]>,
    d_features: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let (w, h, c) = map_dims(feature_map)?;
    let cells = w * h;
    let m_parts = model.parts;
    let pooled = pool(feature_map)?;
    let e = feature_map.data();
    let mut grad = vec![0.0; model.num_params()];
    for m in 0..m_parts {
        let mut dg = vec![0.0; c];
        for i in 0..cells {
            let cell = &e[i * c..(i + 1) * c];
            let mut da = d_attention.map_or(0.0, |d| d[m * cells + i]);
            if let Some(df) = d_features {
                da += crate::numerics::dot(&df[m * c..(m + 1) * c], cell);
            }
            let a = parts.attention[m * cells + i];
            let dz = da * a * (1.0 - a);
            if dz != 0.0 {
                for (acc, v) in dg.iter_mut().zip(cell) {
                    *acc += dz * v;
                }
            }
        }
        for ch in 0..c {
            grad[m * c + ch] = dg[ch] * pooled[ch];
        }
        grad[m_parts * c + m] = dg.iter().sum();
    }
    Ok(grad)
}

/// Part-learning loss of one map and its gradient for the grouping parameters.
pub fn loss_prt_grad(
    model: &GroupingModel,
    feature_map: &Tensor,
    weights: PartLossWeights,
) -> Result<(f64, Vec<f64>)> {
    let parts = forward(model, feature_map)?;
    let (_, h, _) = parts.dims;
    let (loss, da) = loss_prt_with_grad(&parts.attention, model.parts, h, weights)?;
    let grad = backward(model, feature_map, &parts, Some(&da), None)?;
    Ok((loss, grad))
}

/// Mean part-learning loss over a batch and its gradient.
pub fn batch_loss_prt_grad(
    model: &GroupingModel,
    maps: &[&Tensor],
    weights: PartLossWeights,
) -> Result<(f64, Vec<f64>)> {
    let per: Vec<Result<(f64, Vec<f64>)>> = par::map(maps, |m| loss_prt_grad(model, m, weights));
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    for r in per {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = maps.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Initializes grouping weights by clustering channels on where they peak
/// across `maps`, so each part starts out selecting one channel group.
///
/// Each part's weights favour its group and penalize the rest; they are
/// scaled so that the part's best cell on the average map scores
/// `peak_logit`.
pub fn init_from_channel_peaks(
    maps: &[&Tensor],
    parts: usize,
    peak_logit: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GroupingModel> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("no feature maps to initialize from".into()))?;
    let (w, h, c) = map_dims(first)?;
    if parts > c {
        return Err(Error::InvalidInput(format!(
            "{parts} parts but only {c} channels"
        )));
    }
    let cells = w * h;
    let n = maps.len() as f64;
    let mut mean_map = vec![0.0; cells * c];
    let mut mean_pool = vec![0.0; c];
    let mut peak_vectors = vec![Vec::with_capacity(2 * maps.len()); c];
    for map in maps {
        if map.dims() != first.dims() {
            return Err(Error::shape(
                format!("{:?}", first.dims()),
                format!("{:?}", map.dims()),
            ));
        }
        for (acc, v) in mean_map.iter_mut().zip(map.data()) {
            *acc += v / n;
        }
        for (acc, v) in mean_pool.iter_mut().zip(pool(map)?) {
            *acc += v / n;
        }
        for (ch, pv) in peak_vectors.iter_mut().enumerate() {
            let column: Vec<f64> = (0..cells).map(|i| map.data()[i * c + ch]).collect();
            let p = peak(&column);
            pv.push((p / h) as f64);
            pv.push((p % h) as f64);
        }
    }
    let refs: Vec<&[f64]> = peak_vectors.iter().map(Vec::as_slice).collect();
    let (_, labels, _) = kmeans::kmeans(&refs, parts, 50, rng);

    let mut model = GroupingModel::zeros(parts, c)?;
    for m in 0..parts {
        let inside = labels.iter().filter(|&&l| l == m).count().max(1) as f64;
        let outside = (c as f64 - inside).max(1.0);
        let target: Vec<f64> = labels
            .iter()
            .map(|&l| if l == m { 1.0 / inside } else { -2.0 / outside })
            .collect();
        let best = mean_map
            .chunks(c)
            .map(|cell| crate::numerics::dot(&target, cell))
            .fold(f64::NEG_INFINITY, f64::max);
        let alpha = if best > 1e-12 { peak_logit / best } else { 1.0 };
        for ch in 0..c {
            let p = mean_pool[ch];
            model.weight[m * c + ch] = if p.abs() > 1e-12 {
                alpha * target[ch] / p
            } else {
                0.0
            };
        }
    }
    Ok(model)
}
