//! Soft-margin SVM trained by sequential minimal optimization.
//!
//! Dual: minimize `½ αᵀQα − Σα` with `Q_ij = y_i y_j K(x_i, x_j)`,
//! `0 ≤ α_i ≤ C_i`, `Σ y_i α_i = 0`. Working pairs use second-order
//! selection; the per-sample bounds `C_i` carry the class weighting.

use std::collections::VecDeque;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d).exp()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub kernel: Kernel,
    pub c: f64,
    /// Scale the positive bound to `C·n−/n+`.
    pub skew_correction: bool,
    /// Stopping threshold on the maximal KKT violation.
    pub tolerance: f64,
    pub cache_mb: usize,
    pub max_iter: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            kernel: Kernel::Rbf { gamma: 2f64.powi(-11) },
            c: 1.0,
            skew_correction: true,
            tolerance: 1e-3,
            cache_mb: 256,
            max_iter: 10_000_000,
        }
    }
}

/// Raw dual solution.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    /// Decision function is `Σ α_i y_i K(x_i, x) − rho`.
    pub rho: f64,
    pub objective: f64,
    pub iterations: usize,
}

/// Rows of the signed kernel matrix, computed on demand and evicted
/// oldest-first once the budget is used.
struct QCache<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    kernel: Kernel,
    rows: Vec<Option<Rc<Vec<f64>>>>,
    order: VecDeque<usize>,
    capacity: usize,
}

impl<'a> QCache<'a> {
    fn new(x: &'a [Vec<f64>], y: &'a [f64], kernel: Kernel, cache_mb: usize) -> Self {
        let n = x.len();
        let capacity = ((cache_mb << 20) / (8 * n.max(1))).max(2);
        QCache { x, y, kernel, rows: vec![None; n], order: VecDeque::new(), capacity }
    }

    fn row(&mut self, i: usize) -> Rc<Vec<f64>> {
        if let Some(r) = &self.rows[i] {
            return r.clone();
        }
        if self.order.len() >= self.capacity {
            let old = self.order.pop_front().expect("non-empty");
            self.rows[old] = None;
        }
        let xi = &self.x[i];
        let yi = self.y[i];
        let r: Rc<Vec<f64>> =
            Rc::new(self.x.iter().zip(self.y).map(|(xj, &yj)| yi * yj * self.kernel.eval(xi, xj)).collect());
        self.rows[i] = Some(r.clone());
        self.order.push_back(i);
        r
    }
}

fn check_inputs(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Data(format!("{} samples, {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if let Some((i, _)) = x.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(Error::Data(format!("sample {i} has a different feature length")));
    }
    if let Some((i, _)) = x.iter().enumerate().find(|(_, r)| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::numeric("svm input", format!("non-finite feature in sample {i}")));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Data("labels must be +1 or -1".into()));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::Data("SVM training needs both classes".into()));
    }
    Ok(d)
}

/// Solves the dual with per-sample upper bounds `c`.
pub fn solve_dual(
    x: &[Vec<f64>],
    y: &[f64],
    c: &[f64],
    kernel: Kernel,
    tolerance: f64,
    max_iter: usize,
    cache_mb: usize,
) -> Result<DualSolution> {
    check_inputs(x, y)?;
    let n = x.len();
    if c.len() != n || c.iter().any(|&ci| !(ci > 0.0 && ci.is_finite())) {
        return Err(Error::Config("every box bound must be positive and finite".into()));
    }
    let qd: Vec<f64> = x.iter().map(|xi| kernel.eval(xi, xi)).collect();
    let mut q = QCache::new(x, y, kernel, cache_mb);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let upper = |a: &[f64], t: usize| a[t] >= c[t];
    let lower = |a: &[f64], t: usize| a[t] <= 0.0;

    let mut iterations = 0;
    loop {
        // Maximal violating index in I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            if y[t] > 0.0 {
                if !upper(&alpha, t) && -grad[t] >= gmax {
                    gmax = -grad[t];
                    i_sel = Some(t);
                }
            } else if !lower(&alpha, t) && grad[t] >= gmax {
                gmax = grad[t];
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else { break };
        let qi = q.row(i);
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        for t in 0..n {
            let (grad_diff, quad) = if y[t] > 0.0 {
                if lower(&alpha, t) {
                    continue;
                }
                gmax2 = gmax2.max(grad[t]);
                (gmax + grad[t], qd[i] + qd[t] - 2.0 * y[i] * qi[t])
            } else {
                if upper(&alpha, t) {
                    continue;
                }
                gmax2 = gmax2.max(-grad[t]);
                (gmax - grad[t], qd[i] + qd[t] + 2.0 * y[i] * qi[t])
            };
            if grad_diff > 0.0 {
                let obj = -(grad_diff * grad_diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= best {
                    best = obj;
                    j_sel = Some(t);
                }
            }
        }
        if gmax + gmax2 < tolerance {
            break;
        }
        let Some(j) = j_sel else { break };
        if iterations >= max_iter {
            log::warn!("SMO stopped after {max_iter} iterations without reaching tolerance");
            break;
        }
        iterations += 1;

        let qj = q.row(j);
        let (ci, cj) = (c[i], c[j]);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (qd[i] + qd[j] + 2.0 * qi[j]).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let quad = (qd[i] + qd[j] - 2.0 * qi[j]).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for k in 0..n {
            grad[k] += qi[k] * di + qj[k] * dj;
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * grad[t];
        let at_upper = upper(&alpha, t);
        let at_lower = lower(&alpha, t);
        if (at_upper && y[t] < 0.0) || (at_lower && y[t] > 0.0) {
            ub = ub.min(yg);
        } else if at_upper || at_lower {
            lb = lb.max(yg);
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { (ub + lb) / 2.0 };
    let objective = alpha.iter().zip(&grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>() / 2.0;
    Ok(DualSolution { alpha, rho, objective, iterations })
}

/// Trained binary classifier in kernel-expansion form (plus the explicit
/// weight vector for the linear kernel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub c_pos: f64,
    pub c_neg: f64,
    pub support: Vec<Vec<f64>>,
    /// `α_i y_i` per support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
    pub weight: Option<Vec<f64>>,
    pub objective: f64,
    pub iterations: usize,
}

/// Bounds `(C+, C−)` for the given class counts.
pub fn class_bounds(c: f64, n_pos: usize, n_neg: usize, skew_correction: bool) -> (f64, f64) {
    if skew_correction {
        (c * n_neg as f64 / n_pos as f64, c)
    } else {
        (c, c)
    }
}

/// Trains on rows `x` with labels (`true` = positive/genuine).
pub fn train_svm(x: &[Vec<f64>], labels: &[bool], config: &SvmConfig) -> Result<SvmModel> {
    if !(config.c > 0.0 && config.c.is_finite()) {
        return Err(Error::Config(format!("C must be positive, got {}", config.c)));
    }
    if let Kernel::Rbf { gamma } = config.kernel {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let (c_pos, c_neg) = class_bounds(config.c, n_pos.max(1), labels.len() - n_pos, config.skew_correction);
    let c: Vec<f64> = labels.iter().map(|&l| if l { c_pos } else { c_neg }).collect();
    let sol = solve_dual(x, &y, &c, config.kernel, config.tolerance, config.max_iter, config.cache_mb)?;
    let mut support = Vec::new();
    let mut coef = Vec::new();
    for ((xi, &yi), &a) in x.iter().zip(&y).zip(&sol.alpha) {
        if a > 0.0 {
            support.push(xi.clone());
            coef.push(a * yi);
        }
    }
    let weight = (config.kernel == Kernel::Linear).then(|| {
        let mut w = vec![0.0; x[0].len()];
        for (sv, &cf) in support.iter().zip(&coef) {
            w.iter_mut().zip(sv).for_each(|(w, &v)| *w += cf * v);
        }
        w
    });
    Ok(SvmModel {
        kernel: config.kernel,
        c_pos,
        c_neg,
        support,
        coef,
        bias: -sol.rho,
        weight,
        objective: sol.objective,
        iterations: sol.iterations,
    })
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.weight.as_ref().map(Vec::len).or_else(|| self.support.first().map(Vec::len)).unwrap_or(0)
    }

    /// Kernel expansion `Σ coef_i K(sv_i, x) + b`.
    pub fn decision_dual(&self, x: &[f64]) -> f64 {
        self.support.iter().zip(&self.coef).map(|(sv, &c)| c * self.kernel.eval(sv, x)).sum::<f64>() + self.bias
    }

    /// Signed decision value; higher means more likely genuine.
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Data(format!(
                "feature length {} does not match classifier length {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(match &self.weight {
            Some(w) => w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias,
            None => self.decision_dual(x),
        })
    }

    pub fn decision_scores(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.decision(r)).collect()
    }
}

/// Largest KKT violation `max_{I_up}(−y∇f) − min_{I_low}(−y∇f)` of a dual
/// point; 0 or negative at an exact optimum.
pub fn kkt_violation(x: &[Vec<f64>], y: &[f64], c: &[f64], alpha: &[f64], kernel: Kernel) -> f64 {
    let n = x.len();
    let grad: Vec<f64> =
        (0..n).map(|i| (0..n).map(|j| y[i] * y[j] * kernel.eval(&x[i], &x[j]) * alpha[j]).sum::<f64>() - 1.0).collect();
    let (mut up, mut low) = (f64::NEG_INFINITY, f64::INFINITY);
    for t in 0..n {
        let v = -y[t] * grad[t];
        let in_up = (y[t] > 0.0 && alpha[t] < c[t]) || (y[t] < 0.0 && alpha[t] > 0.0);
        let in_low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c[t]);
        if in_up {
            up = up.max(v);
        }
        if in_low {
            low = low.min(v);
        }
    }
    up - low
}

/// `½ αᵀQα − Σα`.
pub fn dual_objective(x: &[Vec<f64>], y: &[f64], alpha: &[f64], kernel: Kernel) -> f64 {
    let n = x.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * kernel.eval(&x[i], &x[j]);
        }
    }
    0.5 * quad - alpha.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn linear(c: f64) -> SvmConfig {
        SvmConfig { kernel: Kernel::Linear, c, ..SvmConfig::default() }
    }

    #[test]
    fn two_points_max_margin() {
        let x = vec![vec![1.0], vec![-1.0]];
        let m = train_svm(&x, &[true, false], &linear(1.0)).unwrap();
        assert!(m.decision(&[0.0]).unwrap().abs() < 1e-9);
        assert!((m.decision(&[1.0]).unwrap() - 1.0).abs() < 1e-9);
        assert!((m.decision(&[-1.0]).unwrap() + 1.0).abs() < 1e-9);
        assert!((m.weight.as_ref().unwrap()[0] - 1.0).abs() < 1e-9);
    }

    fn blobs(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
        let x = labels
            .iter()
            .map(|&l| (0..d).map(|_| rng.random_range(-1.0..1.0) + if l { 0.7 } else { -0.3 }).collect())
            .collect();
        (x, labels)
    }

    #[test]
    fn kkt_within_tolerance() {
        for seed in 0..5 {
            let (x, labels) = blobs(seed, 40, 5);
            for cfg in [linear(1.0), SvmConfig { kernel: Kernel::Rbf { gamma: 0.5 }, ..SvmConfig::default() }] {
                let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
                let n_pos = labels.iter().filter(|&&l| l).count();
                let (cp, cn) = class_bounds(cfg.c, n_pos, 40 - n_pos, true);
                let c: Vec<f64> = labels.iter().map(|&l| if l { cp } else { cn }).collect();
                let sol = solve_dual(&x, &y, &c, cfg.kernel, cfg.tolerance, cfg.max_iter, 1).unwrap();
                assert!(kkt_violation(&x, &y, &c, &sol.alpha, cfg.kernel) <= cfg.tolerance + 1e-12);
                let eq: f64 = sol.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
                assert!(eq.abs() < 1e-9);
                let obj = dual_objective(&x, &y, &sol.alpha, cfg.kernel);
                assert!((obj - sol.objective).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn primal_and_dual_scores_agree() {
        let (x, labels) = blobs(9, 30, 4);
        let m = train_svm(&x, &labels, &linear(0.5)).unwrap();
        for r in &x {
            let a = m.decision(r).unwrap();
            assert!((a - m.decision_dual(r)).abs() < 1e-8);
        }
    }

    #[test]
    fn free_support_vectors_sit_on_margin() {
        let (x, labels) = blobs(4, 40, 3);
        let m = train_svm(&x, &labels, &linear(10.0)).unwrap();
        for (sv, &c) in m.support.iter().zip(&m.coef) {
            let bound = if c > 0.0 { m.c_pos } else { m.c_neg };
            if c.abs() < bound - 1e-9 {
                assert!(m.decision(sv).unwrap().abs() >= 1.0 - 1e-3);
            }
        }
    }

    #[test]
    fn permutation_permutes_scores() {
        let (x, labels) = blobs(2, 20, 3);
        let m = train_svm(&x, &labels, &SvmConfig::default()).unwrap();
        let s = m.decision_scores(&x).unwrap();
        let rev: Vec<Vec<f64>> = x.iter().rev().cloned().collect();
        let mut sr = m.decision_scores(&rev).unwrap();
        sr.reverse();
        assert_eq!(s, sr);
    }

    #[test]
    fn rejects_bad_input() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(train_svm(&x, &[true, true], &SvmConfig::default()).is_err());
        let bad = vec![vec![1.0], vec![f64::NAN]];
        assert!(matches!(train_svm(&bad, &[true, false], &SvmConfig::default()), Err(Error::Numeric { .. })));
        let m = train_svm(&x, &[true, false], &SvmConfig::default()).unwrap();
        assert!(m.decision(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn tiny_cache_gives_same_solution() {
        let (x, labels) = blobs(7, 40, 3);
        let big = train_svm(&x, &labels, &SvmConfig::default()).unwrap();
        let small = train_svm(&x, &labels, &SvmConfig { cache_mb: 0, ..SvmConfig::default() }).unwrap();
        assert_eq!(big, small);
    }
}
