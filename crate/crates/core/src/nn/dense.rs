//! Fully-connected (affine) layers.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// `(d input, d weight, d bias)`.
pub type DenseGrads<T> = (Option<Tensor4<T>>, Vec<T>, Vec<T>);

/// Affine map `y = x·W + b` with `W` stored row-major as `K x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub units: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, units: usize) -> Self {
        Dense { inputs, units, weight: vec![T::ZERO; inputs * units], bias: vec![T::ZERO; units] }
    }

    /// Flattens each sample of `input` and applies the map; output is
    /// `[batch, M, 1, 1]`.
    pub fn forward(&self, input: &Tensor4<T>, layer: &str) -> Result<Tensor4<T>> {
        fc_forward(input, &self.weight, &self.bias, self.inputs, self.units, layer)
    }

    pub fn backward(&self, input: &Tensor4<T>, upstream: &Tensor4<T>, need_input_grad: bool) -> Result<DenseGrads<T>> {
        let n = input.batch();
        if upstream.dims() != [n, self.units, 1, 1] || input.sample_len() != self.inputs {
            return Err(Error::State(format!(
                "fc-{}: upstream gradient {:?} does not match forward input {:?}",
                self.units,
                upstream.dims(),
                input.dims()
            )));
        }
        let (k, m) = (self.inputs, self.units);
        let mut dw = vec![T::ZERO; k * m];
        T::gemm(k, n, m, T::ONE, input.data(), true, upstream.data(), false, T::ZERO, &mut dw);
        let mut db = vec![T::ZERO; m];
        for row in upstream.data().chunks_exact(m) {
            db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
        let dx = if need_input_grad {
            let mut dx = Tensor4::zeros(input.dims());
            T::gemm(n, m, k, T::ONE, upstream.data(), false, &self.weight, true, T::ZERO, dx.data_mut());
            Some(dx)
        } else {
            None
        };
        Ok((dx, dw, db))
    }
}

/// Affine map over flattened samples. A flattened length other than `k` is
/// exactly the fixed-input-size failure mode, so the error reports both.
pub fn fc_forward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &[T],
    bias: &[T],
    k: usize,
    m: usize,
    layer: &str,
) -> Result<Tensor4<T>> {
    if input.sample_len() != k {
        return Err(Error::shape(
            layer,
            format!("expected K={k} inputs per sample, got K={} from {:?}", input.sample_len(), input.dims()),
        ));
    }
    if weight.len() != k * m || bias.len() != m {
        return Err(Error::shape(
            layer,
            format!("weights {} / bias {} do not match {k}x{m}", weight.len(), bias.len()),
        ));
    }
    let n = input.batch();
    let mut out = Tensor4::zeros([n, m, 1, 1]);
    for row in out.data_mut().chunks_exact_mut(m) {
        row.copy_from_slice(bias);
    }
    T::gemm(n, k, m, T::ONE, input.data(), false, weight, false, T::ONE, out.data_mut());
    Ok(out)
}
