use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::Raster;

/// Default padding bound: 10% of each canvas side.
pub fn default_max_pad(canvas: (usize, usize)) -> (usize, usize) {
    (canvas.0 / 10, canvas.1 / 10)
}

/// Pad amounts drawn uniformly from `[0, max_pad]`, shared by one mini-batch.
pub fn draw_pad(max_pad: (usize, usize), rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(0..=max_pad.0), rng.random_range(0..=max_pad.1))
}

/// Grows the canvas by `pad` and places the image at a uniform offset within
/// the slack, filling with background 0.
pub fn pad_image(raster: &Raster, pad: (usize, usize), rng: &mut Rng) -> Raster {
    let top = rng.random_range(0..=pad.0);
    let left = rng.random_range(0..=pad.1);
    raster.paste_into(raster.height() + pad.0, raster.width() + pad.1, top, left)
}

pub fn augment_pad(raster: &Raster, max_pad: (usize, usize), rng: &mut Rng) -> Raster {
    let pad = draw_pad(max_pad, rng);
    pad_image(raster, pad, rng)
}

/// Uniformly placed `height x width` window of `raster`.
pub fn random_crop(raster: &Raster, height: usize, width: usize, rng: &mut Rng) -> Result<Raster> {
    let (h, w) = raster.dims();
    if height > h || width > w || height == 0 || width == 0 {
        return Err(Error::Data(format!("cannot crop {height}x{width} from a {h}x{w} image")));
    }
    let top = rng.random_range(0..=h - height);
    let left = rng.random_range(0..=w - width);
    Ok(raster.crop(top, left, height, width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn stroke_image(h: usize, w: usize) -> Raster {
        Raster::from_fn(h, w, |y, x| if (y * 3 + x * 5) % 11 == 0 { 200 } else { 0 })
    }

    fn find(big: &Raster, small: &Raster) -> Option<(usize, usize)> {
        for t in 0..=big.height() - small.height() {
            for l in 0..=big.width() - small.width() {
                if big.crop(t, l, small.height(), small.width()) == *small {
                    return Some((t, l));
                }
            }
        }
        None
    }

    #[test]
    fn zero_pad_is_identity() {
        let r = stroke_image(9, 13);
        let mut g = rng::stream(1, &[]);
        assert_eq!(augment_pad(&r, (0, 0), &mut g), r);
    }

    #[test]
    fn fixed_pad_keeps_original_intact() {
        let r = stroke_image(300, 300);
        let mut g = rng::stream(2, &[]);
        let out = pad_image(&r, (20, 20), &mut g);
        assert_eq!(out.dims(), (320, 320));
        let (t, l) = find(&out, &r).expect("original present");
        assert!(t <= 20 && l <= 20);
    }

    #[test]
    fn sum_invariant_over_draws() {
        let r = stroke_image(40, 60);
        let mut g = rng::stream(3, &[]);
        for _ in 0..50 {
            let out = augment_pad(&r, (8, 12), &mut g);
            assert_eq!(out.sum(), r.sum());
            assert!(out.height() <= 48 && out.width() <= 72);
        }
    }

    #[test]
    fn offsets_cover_the_slack() {
        let r = Raster::filled(1, 1, 255);
        let mut g = rng::stream(4, &[]);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..400 {
            let out = pad_image(&r, (2, 2), &mut g);
            seen.insert(find(&out, &r).unwrap());
        }
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn crop_bounds() {
        let r = stroke_image(10, 10);
        let mut g = rng::stream(5, &[]);
        assert_eq!(random_crop(&r, 10, 10, &mut g).unwrap(), r);
        assert_eq!(random_crop(&r, 4, 7, &mut g).unwrap().dims(), (4, 7));
        assert!(random_crop(&r, 11, 2, &mut g).is_err());
    }
}
