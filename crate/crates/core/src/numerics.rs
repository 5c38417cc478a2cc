//! Dense-array helpers shared by the training modules.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major dense tensor. Values are kept in `f64`; files store `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "tensor dims must be positive, got {dims:?}"
            )));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                format!("{len} values for dims {dims:?}"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Tensor::new(dims, vec![0.0; len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rounds every value to the nearest `f32`, the on-disk precision.
    pub fn quantized(mut self) -> Self {
        quantize(&mut self.data);
        self
    }
}

/// Rounds values in place to `f32` precision.
pub fn quantize(values: &mut [f64]) {
    for v in values {
        *v = f64::from(*v as f32);
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators break the dependency chain of a serial sum.
    let n = a.len().min(b.len());
    let head = n / 4 * 4;
    let mut acc = [0.0; 4];
    for (x, y) in a[..head].chunks_exact(4).zip(b[..head].chunks_exact(4)) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut rest = 0.0;
    for (x, y) in a[head..n].iter().zip(&b[head..n]) {
        rest += (x - y) * (x - y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-density of the isotropic Gaussian `N(mean, variance * I)` at `f`.
pub fn gaussian_log_density(f: &[f64], mean: &[f64], variance: f64) -> Result<f64> {
    if f.len() != mean.len() {
        return Err(Error::shape(mean.len(), f.len()));
    }
    if !variance.is_finite() || variance <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "variance must be positive and finite, got {variance}"
        )));
    }
    ensure_finite(f, "density argument")?;
    ensure_finite(mean, "density mean")?;
    Ok(gaussian_log_density_unchecked(f, mean, variance))
}

pub(crate) fn gaussian_log_density_unchecked(f: &[f64], mean: &[f64], variance: f64) -> f64 {
    let c = f.len() as f64;
    -0.5 * c * (2.0 * std::f64::consts::PI * variance).ln() - sq_dist(f, mean) / (2.0 * variance)
}

/// `ln(sum(exp(v)))`, shifted by the maximum.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::InvalidInput("log_sum_exp of empty vector".into()));
    }
    Ok(log_sum_exp_unchecked(v))
}

pub(crate) fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of `v` written into a fresh vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp_unchecked(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// One bias-corrected Adam update. Descends along `grads`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::shape(
            format!("{} parameters", state.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    let cfg = state.config;
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidInput("learning rate must be positive".into()));
    }
    ensure_finite(grads, "gradient")?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.first[i] = cfg.beta1 * state.first[i] + (1.0 - cfg.beta1) * g;
        state.second[i] = cfg.beta2 * state.second[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.first[i] / bc1;
        let v_hat = state.second[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// Returns the largest elementwise relative error, using
/// `max(|a|, |b|, 1e-8)` as the denominator.
pub fn check_gradient<F>(mut loss: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::shape(params.len(), analytic.len()));
    }
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = loss(&x);
        x[i] = orig - h;
        let minus = loss(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at perturbation of parameter {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

    #[test]
    fn density_at_mean() {
        let v = gaussian_log_density(&[0.3], &[0.3], 1.0).unwrap();
        assert!(close(v, -HALF_LN_2PI, 1e-12));
    }

    #[test]
    fn density_two_sigma_away() {
        let v = gaussian_log_density(&[2.0], &[0.0], 1.0).unwrap();
        assert!(close(v, -HALF_LN_2PI - 2.0, 1e-12));
    }

    #[test]
    fn density_normalizer_cancels() {
        let var = 1.0 / (2.0 * std::f64::consts::PI);
        let v = gaussian_log_density(&[1.0, -1.0], &[1.0, -1.0], var).unwrap();
        assert!(close(v, 0.0, 1e-12));
    }

    #[test]
    fn density_rejects_bad_inputs() {
        assert!(gaussian_log_density(&[0.0], &[0.0], 0.0).is_err());
        assert!(gaussian_log_density(&[0.0], &[0.0], -1.0).is_err());
        assert!(gaussian_log_density(&[f64::NAN], &[0.0], 1.0).is_err());
        assert!(gaussian_log_density(&[0.0, 1.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn lse_examples() {
        assert!(close(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), 1e-15));
        assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!(close(big, 1000.0 + 2f64.ln(), 1e-12));
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        let mut st = OptimizerState::new(3, AdamConfig::default());
        adam_step(&mut p, &[0.0; 3], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 at t = 1, so the move is lr / (1 + eps).
        let mut p = vec![0.0];
        let mut st = OptimizerState::new(1, AdamConfig::with_learning_rate(0.1));
        adam_step(&mut p, &[1.0], &mut st).unwrap();
        assert!(close(p[0], -0.1 / (1.0 + 1e-8), 1e-15));
    }

    #[test]
    fn adam_is_deterministic_and_checks_shapes() {
        let run = || {
            let mut p = vec![0.5, 0.25];
            let mut st = OptimizerState::new(2, AdamConfig::default());
            for k in 0..5 {
                adam_step(&mut p, &[k as f64, -1.0], &mut st).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        let mut st = OptimizerState::new(2, AdamConfig::default());
        assert!(adam_step(&mut [0.0; 3], &[0.0; 3], &mut st).is_err());
        assert!(adam_step(&mut [0.0; 2], &[0.0; 3], &mut st).is_err());
    }

    #[test]
    fn gradient_checker_accepts_quadratic() {
        let x = vec![0.3, -1.2, 2.0];
        let err = check_gradient(|p| 0.5 * dot(p, p), &x, &x, FD_STEP).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn gradient_checker_reports_wrong_gradient() {
        let x = vec![0.3, -1.2, 2.0];
        let wrong: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = check_gradient(|p| 0.5 * dot(p, p), &x, &wrong, FD_STEP).unwrap();
        // |2x - x| / |2x| = 0.5 for every coordinate.
        assert!(close(err, 0.5, 1e-6), "{err}");
    }

    #[test]
    fn gradient_checker_on_hinge_away_from_kink() {
        // sum_i [1 - y_i w.x_i]_+ with both hinges active.
        let xs = [[0.5, -0.3], [0.2, 0.4]];
        let ys = [1.0, -1.0];
        let loss = |w: &[f64]| -> f64 {
            xs.iter()
                .zip(ys)
                .map(|(x, y)| (1.0 - y * dot(w, x)).max(0.0))
                .sum()
        };
        let w = [0.1, 0.2];
        let mut g = [0.0; 2];
        for (x, y) in xs.iter().zip(ys) {
            if 1.0 - y * dot(&w, x) > 0.0 {
                g[0] -= y * x[0];
                g[1] -= y * x[1];
            }
        }
        let err = check_gradient(loss, &w, &g, FD_STEP).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradient_checker_rejects_non_finite_loss() {
        assert!(check_gradient(|_| f64::NAN, &[1.0], &[0.0], FD_STEP).is_err());
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn lse_shift_invariance(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = log_sum_exp(&shifted).unwrap();
            let b = log_sum_exp(&v).unwrap() + c;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }

        #[test]
        fn density_peaks_at_mean(mean in prop::collection::vec(-5.0f64..5.0, 1..6), delta in 0.01f64..3.0, var in 0.1f64..4.0, j in 0usize..6) {
            let mut f = mean.clone();
            let idx = j % f.len();
            f[idx] += delta;
            let at_mean = gaussian_log_density(&mean, &mean, var).unwrap();
            let off = gaussian_log_density(&f, &mean, var).unwrap();
            prop_assert!(at_mean > off);
        }

        #[test]
        fn adam_zero_grad_identity_prop(p in prop::collection::vec(-10.0f64..10.0, 1..10), lr in 1e-4f64..1.0) {
            let mut q = p.clone();
            let mut st = OptimizerState::new(p.len(), AdamConfig::with_learning_rate(lr));
            adam_step(&mut q, &vec![0.0; p.len()], &mut st).unwrap();
            prop_assert_eq!(q, p);
        }
    }
}
