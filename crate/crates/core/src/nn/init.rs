//! Glorot-uniform initialization.

use rand::Rng as _;

use crate::error::Result;
use crate::nn::dense::Dense;
use crate::nn::model::{Layer, Model};
use crate::nn::spec::NetworkSpec;
use crate::rng::{self, Rng};
use crate::tensor::Scalar;

/// `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn fill_uniform<T: Scalar>(values: &mut [T], bound: f64, rng: &mut Rng) {
    for v in values {
        *v = T::from_f64(rng.random_range(-bound..=bound));
    }
}

/// Fresh fully-connected layer with Glorot weights and zero bias.
pub fn glorot_dense<T: Scalar>(inputs: usize, units: usize, rng: &mut Rng) -> Dense<T> {
    let mut d = Dense::zeros(inputs, units);
    fill_uniform(&mut d.weight, glorot_bound(inputs, units), rng);
    d
}

/// Builds a model for `spec` with Glorot-uniform weights, zero biases and
/// identity batch norm. Identical seeds give bit-identical models.
pub fn glorot_init<T: Scalar>(spec: NetworkSpec, seed: u64) -> Result<Model<T>> {
    let mut model = Model::zeros(spec)?;
    let mut rng = rng::stream(seed, &[rng::tag::INIT]);
    let mut fans = Vec::new();
    for layer in model.layers() {
        match layer {
            Layer::Conv { geometry, in_channels, .. } => {
                let area = geometry.kernel * geometry.kernel;
                fans.push(Some((in_channels * area, geometry.filters * area)));
                fans.push(None);
            }
            Layer::Fc(d) => {
                fans.push(Some((d.inputs, d.units)));
                fans.push(None);
            }
            Layer::BatchNorm(_) => {
                fans.push(None);
                fans.push(None);
            }
            _ => {}
        }
    }
    let user = model.user_head();
    fans.push(Some((user.inputs, user.units)));
    fans.push(None);
    if let Some(f) = model.forgery_head() {
        fans.push(Some((f.inputs, f.units)));
        fans.push(None);
    }
    for (param, fan) in model.params_mut().into_iter().zip(fans) {
        if let Some((fan_in, fan_out)) = fan {
            fill_uniform(param.values, glorot_bound(fan_in, fan_out), &mut rng);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::build_architecture;

    #[test]
    fn same_seed_same_model() {
        let spec = build_architecture("SigNet-SPP-desk", None, 5, true).unwrap();
        let a: Model<f32> = glorot_init(spec.clone(), 7).unwrap();
        let b: Model<f32> = glorot_init(spec.clone(), 7).unwrap();
        let c: Model<f32> = glorot_init(spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn three_by_three_bound_is_one() {
        assert_eq!(glorot_bound(3, 3), 1.0);
        let mut rng = rng::stream(1, &[]);
        let d: Dense<f64> = glorot_dense(3, 3, &mut rng);
        assert!(d.weight.iter().all(|w| w.abs() <= 1.0));
        assert!(d.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn sample_variance_matches_glorot() {
        let (fan_in, fan_out) = (400, 250);
        let mut rng = rng::stream(3, &[]);
        let d: Dense<f64> = glorot_dense(fan_in, fan_out, &mut rng);
        assert_eq!(d.weight.len(), 100_000);
        let n = d.weight.len() as f64;
        let mean = d.weight.iter().sum::<f64>() / n;
        let var = d.weight.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (fan_in + fan_out) as f64;
        assert!((var - expected).abs() < 0.1 * expected, "{var} vs {expected}");
    }

    #[test]
    fn biases_start_at_zero() {
        let spec = build_architecture("SigNet-SPP-desk", None, 5, false).unwrap();
        let m: Model<f64> = glorot_init(spec, 1).unwrap();
        for p in m.params() {
            if p.name.ends_with("bias") || p.name.ends_with("beta") {
                assert!(p.values.iter().all(|&v| v == 0.0), "{}", p.name);
            }
            if p.name.ends_with("gamma") {
                assert!(p.values.iter().all(|&v| v == 1.0));
            }
        }
    }
}
