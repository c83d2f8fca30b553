//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls the code under test to compute an expected
//! value.
#![allow(dead_code)]

pub mod gradients;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `n` values that are pairwise at least 0.05 apart, in random order, so that
/// max-pooling arg-maxes are stable under small perturbations.
pub fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + rng.random_range(0.0..0.05)).collect();
    v.shuffle(rng);
    v
}

/// Central differences of `f` with respect to every coordinate of `x`.
pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------- metrics

/// Brute-force EER in percent: FRR(t) = %{g < t}, FAR(t) = %{f ≥ t} over
/// t ∈ {−∞} ∪ scores ∪ {+∞}; linear interpolation across the first sign
/// change of FAR − FRR.
pub fn eer_oracle(genuine: &[f64], forgery: &[f64]) -> f64 {
    let mut ts: Vec<f64> = genuine.iter().chain(forgery).copied().collect();
    ts.push(f64::NEG_INFINITY);
    ts.push(f64::INFINITY);
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let rates = |t: f64| {
        let frr = 100.0 * genuine.iter().filter(|&&g| g < t).count() as f64 / genuine.len() as f64;
        let far = 100.0 * forgery.iter().filter(|&&f| f >= t).count() as f64 / forgery.len() as f64;
        (frr, far)
    };
    let mut prev = rates(ts[0]);
    for &t in &ts[1..] {
        let cur = rates(t);
        if cur.0 >= cur.1 {
            let (d0, d1) = (prev.1 - prev.0, cur.1 - cur.0);
            let s = d0 / (d0 - d1);
            return prev.0 + s * (cur.0 - prev.0);
        }
        prev = cur;
    }
    unreachable!("FRR reaches 100 at +inf")
}

// -------------------------------------------------------------------- svm

/// Primal-dual interior-point solution of
/// `min ½αᵀQα − Σα  s.t.  yᵀα = 0, 0 ≤ α ≤ c`, `Q_ij = y_i y_j K_ij`.
/// Returns `(α, objective)`.
pub fn qp_dual_oracle(k: &DMatrix<f64>, y: &[f64], c: &[f64]) -> (Vec<f64>, f64) {
    let n = y.len();
    let q = DMatrix::from_fn(n, n, |i, j| y[i] * y[j] * k[(i, j)]);
    let a = DVector::from_column_slice(y);
    let u = DVector::from_column_slice(c);
    let mut x = u.map(|v| v / 2.0);
    let mut z = DVector::from_element(n, 1.0);
    let mut w = DVector::from_element(n, 1.0);
    let mut nu = 0.0;
    for _ in 0..200 {
        let s = &u - &x;
        let gap = x.dot(&z) + s.dot(&w);
        let rd = &q * &x - DVector::from_element(n, 1.0) - &z + &w + &a * nu;
        let rp = a.dot(&x);
        if gap < 1e-13 && rd.amax() < 1e-11 && rp.abs() < 1e-11 {
            break;
        }
        let mu = 0.1 * gap / (2 * n) as f64;
        let mut m = DMatrix::zeros(n + 1, n + 1);
        let mut rhs = DVector::zeros(n + 1);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = q[(i, j)];
            }
            m[(i, i)] += z[i] / x[i] + w[i] / s[i];
            m[(i, n)] = a[i];
            m[(n, i)] = a[i];
            rhs[i] = -(rd[i] + z[i] - w[i]) + mu / x[i] - mu / s[i];
        }
        rhs[n] = -rp;
        let sol = m.lu().solve(&rhs).expect("KKT system is nonsingular");
        let dx = sol.rows(0, n).into_owned();
        let dnu = sol[n];
        let dz = DVector::from_fn(n, |i, _| mu / x[i] - z[i] - z[i] / x[i] * dx[i]);
        let dw = DVector::from_fn(n, |i, _| mu / s[i] - w[i] + w[i] / s[i] * dx[i]);
        let mut step: f64 = 1.0;
        for i in 0..n {
            let ratio = |v: f64, dv: f64| if dv < 0.0 { -v / dv } else { f64::INFINITY };
            step = step
                .min(0.99 * ratio(x[i], dx[i]))
                .min(0.99 * ratio(s[i], -dx[i]))
                .min(0.99 * ratio(z[i], dz[i]))
                .min(0.99 * ratio(w[i], dw[i]));
        }
        x += &dx * step;
        z += &dz * step;
        w += &dw * step;
        nu += dnu * step;
    }
    let obj = 0.5 * x.dot(&(&q * &x)) - x.sum();
    (x.iter().copied().collect(), obj)
}

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).exp()
}

pub fn gram(x: &[Vec<f64>], kernel: impl Fn(&[f64], &[f64]) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), x.len(), |i, j| kernel(&x[i], &x[j]))
}

// ------------------------------------------------------------ multi-size

/// Algorithm trace: repeatedly visit the active groups in ascending id, one
/// batch each, removing a group once it has served all its batches.
pub fn round_robin_oracle(counts: &[usize]) -> Vec<usize> {
    let mut served = vec![0; counts.len()];
    let mut trace = Vec::new();
    loop {
        let active: Vec<usize> = (0..counts.len()).filter(|&g| served[g] < counts[g]).collect();
        if active.is_empty() {
            return trace;
        }
        for g in active {
            trace.push(g);
            served[g] += 1;
        }
    }
}

// ----------------------------------------------------------------- canvas

/// Smallest integer `t ≥ mean + 3·std` (population std), in exact integer
/// arithmetic: with S = Σv, Q = Σv², n·t − S ≥ 0 and (n·t − S)² ≥ 9(nQ − S²).
pub fn tau_oracle(values: &[usize]) -> usize {
    let n = values.len() as i128;
    let s: i128 = values.iter().map(|&v| v as i128).sum();
    let q: i128 = values.iter().map(|&v| (v as i128).pow(2)).sum();
    let var_n2 = n * q - s * s;
    let mut t = (s / n).max(0);
    while !(n * t - s >= 0 && (n * t - s).pow(2) >= 9 * var_n2) {
        t += 1;
    }
    t as usize
}

/// Median; mean of the middle pair rounded up for even counts.
pub fn median_oracle(values: &[usize]) -> usize {
    let mut v = values.to_vec();
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let s = v[n / 2 - 1] + v[n / 2];
        s / 2 + s % 2
    }
}

/// Expected canvas id and canvas dims for every image of a development set.
pub fn canvas_oracle(dims: &[(usize, usize)]) -> Vec<(usize, (usize, usize))> {
    let hs: Vec<usize> = dims.iter().map(|d| d.0).collect();
    let ws: Vec<usize> = dims.iter().map(|d| d.1).collect();
    let (th, tw) = (tau_oracle(&hs), tau_oracle(&ws));
    let inl: Vec<(usize, usize)> = dims.iter().copied().filter(|&(h, w)| h <= th && w <= tw).collect();
    let mh = median_oracle(&inl.iter().map(|d| d.0).collect::<Vec<_>>());
    let mw = median_oracle(&inl.iter().map(|d| d.1).collect::<Vec<_>>());
    let max = (*hs.iter().max().unwrap(), *ws.iter().max().unwrap());
    dims.iter()
        .map(|&(h, w)| {
            if h > th || w > tw {
                (4, max)
            } else {
                let tall = h > mh;
                let wide = w > mw;
                let id = usize::from(tall) * 2 + usize::from(wide);
                (id, (if tall { th } else { mh }, if wide { tw } else { mw }))
            }
        })
        .collect()
}

// ------------------------------------------------------------------- loss

/// Per-sample `(L_c, L_f)` computed directly from the definitions.
pub fn loss_terms(logits: &[f64], label: usize, zf: f64, forged: bool) -> (f64, f64) {
    let denom: f64 = logits.iter().map(|v| v.exp()).sum();
    let lc = -(logits[label].exp() / denom).ln();
    let p = 1.0 / (1.0 + (-zf).exp());
    let lf = if forged { -p.ln() } else { -(1.0 - p).ln() };
    (lc, lf)
}
