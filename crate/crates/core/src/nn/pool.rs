//! Max pooling with explicit padding.

use crate::error::{Error, Result};
use crate::nn::spec::window_out;
use crate::tensor::{Scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    fn name(&self) -> String {
        format!("pool{}-s{}-p{}", self.size, self.stride, self.padding)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.size == 0 || self.stride == 0 {
            return Err(Error::shape(self.name(), "size and stride must be >= 1"));
        }
        if self.padding >= self.size {
            return Err(Error::shape(self.name(), "padding must be smaller than the window"));
        }
        match (window_out(h, self.size, self.stride, self.padding), window_out(w, self.size, self.stride, self.padding))
        {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::shape(self.name(), format!("window {} larger than padded input {h}x{w}", self.size))),
        }
    }
}

/// Max pooling. Padding cells never win; ties go to the first maximum in
/// row-major order. Returns the pooled tensor and the flat in-plane argmax of
/// every output.
pub fn maxpool_forward<T: Scalar>(input: &Tensor4<T>, geo: &PoolGeometry) -> Result<(Tensor4<T>, Vec<u32>)> {
    let [n, c, h, w] = input.dims();
    let (oh, ow) = geo.output_hw(h, w)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let p = geo.padding as isize;
    for plane in input.data().chunks_exact(h * w) {
        for oy in 0..oh {
            let y0 = (oy * geo.stride) as isize - p;
            let ys = y0.max(0) as usize..((y0 + geo.size as isize).min(h as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * geo.stride) as isize - p;
                let xs = x0.max(0) as usize..((x0 + geo.size as isize).min(w as isize)) as usize;
                let mut best = T::NEG_INFINITY;
                let mut at = ys.start * w + xs.start;
                for y in ys.clone() {
                    for x in xs.clone() {
                        let v = plane[y * w + x];
                        if v > best {
                            best = v;
                            at = y * w + x;
                        }
                    }
                }
                out.push(plane[at].max(best));
                argmax.push(at as u32);
            }
        }
    }
    Ok((Tensor4::from_vec([n, c, oh, ow], out)?, argmax))
}

pub fn maxpool_backward<T: Scalar>(
    upstream: &Tensor4<T>,
    argmax: &[u32],
    input_dims: [usize; 4],
) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input_dims;
    if upstream.len() != argmax.len() || upstream.batch() != n || upstream.channels() != c {
        return Err(Error::State(format!(
            "max-pool gradient {:?} does not match recorded indices for input {:?}",
            upstream.dims(),
            input_dims
        )));
    }
    let per_plane = upstream.height() * upstream.width();
    let mut grad = Tensor4::zeros(input_dims);
    if per_plane == 0 {
        return Ok(grad);
    }
    for ((plane, up), idx) in grad
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(upstream.data().chunks_exact(per_plane))
        .zip(argmax.chunks_exact(per_plane))
    {
        for (&g, &at) in up.iter().zip(idx) {
            plane[at as usize] += g;
        }
    }
    Ok(grad)
}
