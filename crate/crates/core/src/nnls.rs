//! Lawson–Hanson active-set nonnegative least squares for small systems.

use crate::numerics::dot;

#[derive(Clone, Debug, PartialEq)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Solves `min ||A x - b||` subject to `x >= 0`, where `columns[j]` is the
/// j-th column of `A`.
pub fn nnls(columns: &[Vec<f64>], b: &[f64], max_iter: usize) -> NnlsSolution {
    let n = columns.len();
    let gram: Vec<Vec<f64>> = columns
        .iter()
        .map(|ci| columns.iter().map(|cj| dot(ci, cj)).collect())
        .collect();
    let atb: Vec<f64> = columns.iter().map(|c| dot(c, b)).collect();
    let scale = gram
        .iter()
        .enumerate()
        .map(|(i, r)| r[i])
        .fold(0.0, f64::max)
        .max(1e-300);
    let tol = 1e-12 * scale * (1.0 + dot(b, b).sqrt());

    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    // Gradient of -0.5||Ax-b||^2, i.e. A^T (b - A x), from the Gram form.
    let residual_grad = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| atb[i] - gram[i].iter().zip(x).map(|(g, v)| g * v).sum::<f64>())
            .collect()
    };
    let mut iterations = 0;
    loop {
        let w = residual_grad(&x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(t) = candidate else {
            return NnlsSolution {
                x,
                converged: true,
                iterations,
            };
        };
        if iterations >= max_iter {
            return NnlsSolution {
                x,
                converged: false,
                iterations,
            };
        }
        iterations += 1;
        passive[t] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let s_p = solve_sub(&gram, &atb, &idx);
            let mut s = vec![0.0; n];
            for (k, &j) in idx.iter().enumerate() {
                s[j] = s_p[k];
            }
            if idx.iter().all(|&j| s[j] > 0.0) {
                x = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &j in &idx {
                if s[j] <= 0.0 {
                    let denom = x[j] - s[j];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            for j in 0..n {
                x[j] += alpha * (s[j] - x[j]);
            }
            for &j in &idx {
                if x[j] <= 1e-15 * (1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
}

/// Least squares on the passive columns through a Cholesky factorization of
/// their Gram matrix. A tiny ridge keeps rank-deficient blocks solvable.
fn solve_sub(gram: &[Vec<f64>], atb: &[f64], idx: &[usize]) -> Vec<f64> {
    let p = idx.len();
    let mut a = vec![vec![0.0; p]; p];
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            a[r][c] = gram[i][j];
        }
        a[r][r] += 1e-14 * gram[i][i].max(1e-300);
    }
    let rhs: Vec<f64> = idx.iter().map(|&i| atb[i]).collect();
    let mut l = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                l[i][j] = s.max(1e-300).sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; p];
    for i in 0..p {
        y[i] = (rhs[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        x[i] = (y[i] - (i + 1..p).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_optimum_inside_orthant() {
        let cols = vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]];
        let sol = nnls(&cols, &[3.0, 4.0, 1.0], 50);
        assert!(sol.converged);
        assert!((sol.x[0] - 3.0).abs() < 1e-12 && (sol.x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn clamps_negative_direction() {
        let cols = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let sol = nnls(&cols, &[-1.0, 2.0], 50);
        assert_eq!(sol.x[0], 0.0);
        assert!((sol.x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_target_gives_zero() {
        let cols = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let sol = nnls(&cols, &[0.0, 0.0, 5.0], 50);
        assert!(sol.converged);
        assert_eq!(sol.x, vec![0.0, 0.0]);
    }

    #[test]
    fn matches_brute_force_on_a_small_problem() {
        // Enumerate every support set and keep the best feasible solution.
        let cols = vec![
            vec![1.0, 0.2, -0.3],
            vec![0.4, 1.0, 0.1],
            vec![-0.2, 0.3, 1.0],
        ];
        let b = [0.5, -1.0, 0.8];
        let sol = nnls(&cols, &b, 50);
        let obj = |x: &[f64]| -> f64 {
            (0..3)
                .map(|r| {
                    let ax: f64 = (0..3).map(|j| cols[j][r] * x[j]).sum();
                    (ax - b[r]).powi(2)
                })
                .sum()
        };
        let gram: Vec<Vec<f64>> = cols
            .iter()
            .map(|a| cols.iter().map(|c| dot(a, c)).collect())
            .collect();
        let atb: Vec<f64> = cols.iter().map(|c| dot(c, &b)).collect();
        let mut best = f64::INFINITY;
        for mask in 0u32..8 {
            let idx: Vec<usize> = (0..3).filter(|j| mask & (1 << j) != 0).collect();
            let mut x = vec![0.0; 3];
            if !idx.is_empty() {
                let s = solve_sub(&gram, &atb, &idx);
                if s.iter().any(|v| *v < 0.0) {
                    continue;
                }
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = s[k];
                }
            }
            best = best.min(obj(&x));
        }
        assert!((obj(&sol.x) - best).abs() < 1e-10);
    }
}
