//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Intermediates of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, as folded into the running average.
    pub batch_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, input: &Tensor4<T>) -> Result<()> {
        if input.channels() != self.channels() {
            return Err(Error::shape(
                "bn",
                format!("input has {} channels, layer normalizes {}", input.channels(), self.channels()),
            ));
        }
        Ok(())
    }

    /// Normalizes with batch statistics; running statistics are left alone
    /// (see [`BatchNorm::update_running`]).
    pub fn forward_train(&self, input: &Tensor4<T>) -> Result<(Tensor4<T>, BnCache<T>)> {
        self.check(input)?;
        let [n, c, h, w] = input.dims();
        let count = n * h * w;
        if count < 2 {
            return Err(Error::shape("bn", format!("training needs at least 2 values per channel, got {count}")));
        }
        let plane = h * w;
        let eps = T::from_f64(BN_EPSILON);
        let cnt = T::from_f64(count as f64);
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        for (i, chunk) in input.data().chunks_exact(plane).enumerate() {
            mean[i % c] += chunk.iter().copied().sum::<T>();
        }
        mean.iter_mut().for_each(|m| *m = *m / cnt);
        for (i, chunk) in input.data().chunks_exact(plane).enumerate() {
            let m = mean[i % c];
            var[i % c] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
        let unbiased: Vec<T> = var.iter().map(|&v| v / T::from_f64((count - 1) as f64)).collect();
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v / cnt + eps).sqrt()).collect();

        let mut xhat = input.clone();
        let mut out = input.clone();
        for (i, (xh, o)) in
            xhat.data_mut().chunks_exact_mut(plane).zip(out.data_mut().chunks_exact_mut(plane)).enumerate()
        {
            let ch = i % c;
            let (m, s, g, b) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
            for (x, y) in xh.iter_mut().zip(o.iter_mut()) {
                *x = (*x - m) * s;
                *y = g * *x + b;
            }
        }
        Ok((out, BnCache { xhat, inv_std, batch_mean: mean, batch_var: unbiased }))
    }

    pub fn forward_eval(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(input)?;
        let [_, c, h, w] = input.dims();
        let eps = T::from_f64(BN_EPSILON);
        let mut out = input.clone();
        for (i, o) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            let ch = i % c;
            let scale = self.gamma[ch] / (self.running_var[ch] + eps).sqrt();
            let shift = self.beta[ch] - self.running_mean[ch] * scale;
            o.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        Ok(out)
    }

    pub fn forward(&self, input: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, Option<BnCache<T>>)> {
        match mode {
            Mode::Train => self.forward_train(input).map(|(y, c)| (y, Some(c))),
            Mode::Eval => self.forward_eval(input).map(|y| (y, None)),
        }
    }

    /// Exponential moving average of the batch statistics.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        let one_m = T::ONE - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&cache.batch_mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&cache.batch_var) {
            *r = m * *r + one_m * b;
        }
    }

    /// Returns `(d input, d gamma, d beta)`.
    pub fn backward(&self, upstream: &Tensor4<T>, cache: &BnCache<T>) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
        if upstream.dims() != cache.xhat.dims() {
            return Err(Error::State(format!(
                "bn: upstream gradient {:?} does not match cached forward {:?}",
                upstream.dims(),
                cache.xhat.dims()
            )));
        }
        let [n, c, h, w] = upstream.dims();
        let plane = h * w;
        let cnt = T::from_f64((n * plane) as f64);
        let mut dgamma = vec![T::ZERO; c];
        let mut dbeta = vec![T::ZERO; c];
        for (i, (up, xh)) in upstream.data().chunks_exact(plane).zip(cache.xhat.data().chunks_exact(plane)).enumerate()
        {
            let ch = i % c;
            dbeta[ch] += up.iter().copied().sum::<T>();
            dgamma[ch] += up.iter().zip(xh).map(|(&g, &x)| g * x).sum::<T>();
        }
        // dx = gamma * inv_std / N * (N * dy - sum(dy) - xhat * sum(dy * xhat))
        let mut dx = upstream.clone();
        for (i, (d, xh)) in dx.data_mut().chunks_exact_mut(plane).zip(cache.xhat.data().chunks_exact(plane)).enumerate()
        {
            let ch = i % c;
            let k = self.gamma[ch] * cache.inv_std[ch] / cnt;
            let (sb, sg) = (dbeta[ch], dgamma[ch]);
            for (v, &x) in d.iter_mut().zip(xh) {
                *v = k * (cnt * *v - sb - x * sg);
            }
        }
        Ok((dx, dgamma, dbeta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor4<f64> {
        Tensor4::from_fn([3, 2, 4, 5], |[n, c, y, x]| {
            ((n * 31 + c * 17 + y * 7 + x * 3) % 13) as f64 * (c as f64 + 0.5)
        })
    }

    #[test]
    fn train_output_is_standardized() {
        let bn = BatchNorm::<f64>::new(2);
        let (y, _) = bn.forward_train(&sample()).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| {
                    let y = &y;
                    (0..20).map(move |i| y.get([n, ch, i / 5, i % 5]))
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_with_unit_statistics_is_identity() {
        let bn = BatchNorm::<f64>::new(2);
        let x = sample();
        let y = bn.forward_eval(&x).unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a * scale - b).abs() < 1e-12);
            assert!((a - b).abs() <= a.abs() * BN_EPSILON);
        }
    }

    #[test]
    fn zero_variance_channel_stays_finite() {
        let bn = BatchNorm::<f64>::new(1);
        let (y, _) = bn.forward_train(&Tensor4::filled([2, 1, 2, 2], 3.0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_value_per_channel_rejected() {
        let bn = BatchNorm::<f64>::new(4);
        assert!(bn.forward_train(&Tensor4::zeros([1, 4, 1, 1])).is_err());
    }

    #[test]
    fn running_statistics_move_toward_batch() {
        let mut bn = BatchNorm::<f64>::new(2);
        let (_, cache) = bn.forward_train(&sample()).unwrap();
        bn.update_running(&cache);
        for ch in 0..2 {
            let expected = 0.1 * cache.batch_mean[ch];
            assert!((bn.running_mean[ch] - expected).abs() < 1e-12);
            let expected = 0.9 + 0.1 * cache.batch_var[ch];
            assert!((bn.running_var[ch] - expected).abs() < 1e-12);
        }
    }
}
