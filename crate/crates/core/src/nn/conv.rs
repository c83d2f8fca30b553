//! 2-D convolution (cross-correlation) via im2col + GEMM.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::spec::window_out;
use crate::tensor::{Scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub filters: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    fn name(&self) -> String {
        format!("conv{}-{}-s{}-p{}", self.kernel, self.filters, self.stride, self.padding)
    }

    pub fn weight_len(&self, channels: usize) -> usize {
        self.filters * channels * self.kernel * self.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (
            window_out(h, self.kernel, self.stride, self.padding),
            window_out(w, self.kernel, self.stride, self.padding),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::shape(self.name(), format!("kernel {} does not fit input {h}x{w}", self.kernel))),
        }
    }

    fn check(&self, input: [usize; 4], weight: usize, bias: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::shape(self.name(), "stride must be >= 1"));
        }
        let expected = self.weight_len(input[1]);
        if weight != expected {
            return Err(Error::shape(
                self.name(),
                format!("weights hold {weight} values, {} input channels need {expected}", input[1]),
            ));
        }
        if bias != self.filters {
            return Err(Error::shape(self.name(), format!("bias holds {bias} values, expected {}", self.filters)));
        }
        self.output_hw(input[2], input[3])
    }
}

/// Unfolds one `[c, h, w]` sample into a `[c·k·k, oh·ow]` matrix.
fn im2col<T: Scalar>(
    sample: &[T],
    [c, h, w]: [usize; 3],
    geo: &ConvGeometry,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let k = geo.kernel;
    let p = geo.padding as isize;
    let s = geo.stride;
    let plane = oh * ow;
    for ch in 0..c {
        let src = &sample[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..oh {
                    let y = (oy * s + ky) as isize - p;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= h as isize {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &src[y as usize * w..(y as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let x = (ox * s + kx) as isize - p;
                        *o = if x < 0 || x >= w as isize { T::ZERO } else { src_row[x as usize] };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`], accumulating overlapping contributions.
fn col2im<T: Scalar>(
    cols: &[T],
    [c, h, w]: [usize; 3],
    geo: &ConvGeometry,
    (oh, ow): (usize, usize),
    sample: &mut [T],
) {
    let k = geo.kernel;
    let p = geo.padding as isize;
    let s = geo.stride;
    let plane = oh * ow;
    for ch in 0..c {
        let dst = &mut sample[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..oh {
                    let y = (oy * s + ky) as isize - p;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[y as usize * w..(y as usize + 1) * w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let x = (ox * s + kx) as isize - p;
                        if x >= 0 && x < w as isize {
                            dst_row[x as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is `[filters, channels, k, k]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor4<T>,
    geo: &ConvGeometry,
    weight: &[T],
    bias: &[T],
) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input.dims();
    let (oh, ow) = geo.check(input.dims(), weight.len(), bias.len())?;
    let f = geo.filters;
    let rows = c * geo.kernel * geo.kernel;
    let plane = oh * ow;
    let mut out = Tensor4::zeros([n, f, oh, ow]);
    if n == 0 {
        return Ok(out);
    }
    let in_len = c * h * w;
    out.data_mut().par_chunks_mut(f * plane).zip(input.data().par_chunks(in_len)).for_each_init(
        || vec![T::ZERO; rows * plane],
        |cols, (dst, src)| {
            im2col(src, [c, h, w], geo, (oh, ow), cols);
            for (fi, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                chunk.fill(bias[fi]);
            }
            T::gemm(f, rows, plane, T::ONE, weight, false, cols, false, T::ONE, dst);
        },
    );
    Ok(out)
}

pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Option<Tensor4<T>>,
}

/// Gradients of a convolution given the forward input and `d(loss)/d(output)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    geo: &ConvGeometry,
    weight: &[T],
    upstream: &Tensor4<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let [n, c, h, w] = input.dims();
    let (oh, ow) = geo.check(input.dims(), weight.len(), geo.filters)?;
    let f = geo.filters;
    if upstream.dims() != [n, f, oh, ow] {
        return Err(Error::State(format!(
            "{}: upstream gradient dims {:?}, forward produced {:?}",
            geo.name(),
            upstream.dims(),
            [n, f, oh, ow]
        )));
    }
    let rows = c * geo.kernel * geo.kernel;
    let plane = oh * ow;
    let in_len = c * h * w;

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(in_len.max(1))
        .zip(upstream.data().par_chunks((f * plane).max(1)))
        .map(|(src, up)| {
            let mut cols = vec![T::ZERO; rows * plane];
            im2col(src, [c, h, w], geo, (oh, ow), &mut cols);
            let mut dw = vec![T::ZERO; f * rows];
            T::gemm(f, plane, rows, T::ONE, up, false, &cols, true, T::ZERO, &mut dw);
            let db = up.chunks_exact(plane).map(|ch| ch.iter().copied().sum()).collect();
            let mut dx = Vec::new();
            if need_input_grad {
                T::gemm(rows, f, plane, T::ONE, weight, true, up, false, T::ZERO, &mut cols);
                dx = vec![T::ZERO; in_len];
                col2im(&cols, [c, h, w], geo, (oh, ow), &mut dx);
            }
            (dw, db, dx)
        })
        .collect();

    let mut grads = ConvGrads { weight: vec![T::ZERO; f * rows], bias: vec![T::ZERO; f], input: None };
    let mut dx_all = Vec::with_capacity(if need_input_grad { n * in_len } else { 0 });
    // Summed in sample order so results do not depend on thread scheduling.
    for (dw, db, dx) in per_sample {
        grads.weight.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        grads.bias.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
        dx_all.extend(dx);
    }
    if need_input_grad {
        grads.input = Some(Tensor4::from_vec([n, c, h, w], dx_all)?);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_window() {
        let input = Tensor4::<f64>::filled([1, 1, 3, 3], 1.0);
        let geo = ConvGeometry { kernel: 3, filters: 1, stride: 1, padding: 0 };
        let out = conv2d_forward(&input, &geo, &[1.0; 9], &[0.0]).unwrap();
        assert_eq!(out.dims(), [1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn strided_padded_output_size() {
        let input = Tensor4::<f64>::zeros([1, 1, 5, 5]);
        let geo = ConvGeometry { kernel: 3, filters: 2, stride: 2, padding: 1 };
        let out = conv2d_forward(&input, &geo, &[0.0; 18], &[0.0; 2]).unwrap();
        assert_eq!(out.dims(), [1, 2, 3, 3]);
    }

    #[test]
    fn channel_mismatch_names_layer() {
        let input = Tensor4::<f64>::zeros([1, 2, 5, 5]);
        let geo = ConvGeometry { kernel: 3, filters: 1, stride: 1, padding: 0 };
        let err = conv2d_forward(&input, &geo, &[0.0; 9], &[0.0]).unwrap_err();
        match err {
            Error::Shape { layer, .. } => assert!(layer.starts_with("conv3-1")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let geo = ConvGeometry { kernel: 3, filters: 1, stride: 2, padding: 1 };
        let dims = [2, 5, 6];
        let (oh, ow) = geo.output_hw(5, 6).unwrap();
        let x: Vec<f64> = (0..60).map(|i| ((i * 37) % 17) as f64 - 8.0).collect();
        let y: Vec<f64> = (0..18 * oh * ow).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut cols = vec![0.0; 18 * oh * ow];
        im2col(&x, dims, &geo, (oh, ow), &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 60];
        col2im(&y, dims, &geo, (oh, ow), &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
