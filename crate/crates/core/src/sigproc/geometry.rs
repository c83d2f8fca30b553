use crate::error::{Error, Result};

use super::Raster;

/// Places `raster` at `(⌊(H−h)/2⌋, ⌊(W−w)/2⌋)` on a zero `H x W` canvas.
pub fn center_in_canvas(raster: &Raster, height: usize, width: usize) -> Result<Raster> {
    let (h, w) = raster.dims();
    if h > height || w > width {
        return Err(Error::Data(format!("image {h}x{w} exceeds canvas {height}x{width}")));
    }
    Ok(raster.paste_into(height, width, (height - h) / 2, (width - w) / 2))
}

/// Bilinear resampling with pixel centers at half-integer coordinates.
pub fn resize_bilinear(raster: &Raster, height: usize, width: usize) -> Result<Raster> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("resize target {height}x{width} is empty")));
    }
    let (h, w) = raster.dims();
    if (h, w) == (height, width) {
        return Ok(raster.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(height, h);
    let xs = taps(width, w);
    Ok(Raster::from_fn(height, width, |y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = raster.get(y0, x0) as f64 * (1.0 - fx) + raster.get(y0, x1) as f64 * fx;
        let bot = raster.get(y1, x0) as f64 * (1.0 - fx) + raster.get(y1, x1) as f64 * fx;
        (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8
    }))
}

/// Centers `raster` on the canvas, first shrinking it (aspect preserved) if it
/// does not fit.
pub fn fit_to_canvas(raster: &Raster, height: usize, width: usize) -> Result<Raster> {
    let (h, w) = raster.dims();
    if h <= height && w <= width {
        return center_in_canvas(raster, height, width);
    }
    let scale = (height as f64 / h as f64).min(width as f64 / w as f64);
    let nh = ((h as f64 * scale).floor() as usize).clamp(1, height);
    let nw = ((w as f64 * scale).floor() as usize).clamp(1, width);
    center_in_canvas(&resize_bilinear(raster, nh, nw)?, height, width)
}
