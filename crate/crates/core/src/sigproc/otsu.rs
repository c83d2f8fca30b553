use crate::error::{Error, Result};

use super::Raster;

pub fn histogram(raster: &Raster) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &p in raster.pixels() {
        h[p as usize] += 1;
    }
    h
}

/// Otsu's threshold. Pixels `< t` form the dark class, `>= t` the bright
/// class; `t` ranges over `1..=255` and ties go to the lowest level.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let levels = hist.iter().filter(|&&c| c > 0).count();
    if levels < 2 {
        return Err(Error::Data("degenerate histogram: fewer than 2 gray levels".into()));
    }
    let total: u64 = hist.iter().sum();
    let sum: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best = (f64::NEG_INFINITY, 1u8);
    for t in 1..256usize {
        n0 += hist[t - 1];
        s0 += (t as u128 - 1) * hist[t - 1] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // n0*n1*(mu0 - mu1)^2 = (s0*n1 - s1*n0)^2 / (n0*n1)
        let s1 = sum - s0;
        let d = (s0 * n1 as u128) as f64 - (s1 * n0 as u128) as f64;
        let score = d * d / (n0 as f64 * n1 as f64);
        if score > best.0 {
            best = (score, t as u8);
        }
    }
    Ok(best.1)
}

/// Sets background (`>= ` Otsu threshold) to white, then inverts, so the
/// background becomes exactly 0 and strokes keep their grayscale.
pub fn remove_background_and_invert(raster: &Raster) -> Result<Raster> {
    let t = otsu_threshold(&histogram(raster))?;
    let mut out = raster.clone();
    for p in out.pixels_mut() {
        *p = if *p >= t { 0 } else { 255 - *p };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Exhaustive sweep with the textbook weights-and-means form.
    fn oracle(hist: &[u64; 256]) -> (u8, f64) {
        let total: f64 = hist.iter().sum::<u64>() as f64;
        let mut best = (0u8, f64::NEG_INFINITY);
        for t in 1..256 {
            let (lo, hi) = hist.split_at(t);
            let n0: f64 = lo.iter().sum::<u64>() as f64;
            let n1: f64 = hi.iter().sum::<u64>() as f64;
            if n0 == 0.0 || n1 == 0.0 {
                continue;
            }
            let m0 = lo.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / n0;
            let m1 = hi.iter().enumerate().map(|(i, &c)| (i + t) as f64 * c as f64).sum::<f64>() / n1;
            let v = (n0 / total) * (n1 / total) * (m0 - m1).powi(2);
            if v > best.1 * (1.0 + 1e-12) {
                best = (t as u8, v);
            }
        }
        best
    }

    fn variance_at(hist: &[u64; 256], t: usize) -> f64 {
        let total: f64 = hist.iter().sum::<u64>() as f64;
        let (lo, hi) = hist.split_at(t);
        let n0: f64 = lo.iter().sum::<u64>() as f64;
        let n1: f64 = hi.iter().sum::<u64>() as f64;
        let m0 = lo.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / n0;
        let m1 = hi.iter().enumerate().map(|(i, &c)| (i + t) as f64 * c as f64).sum::<f64>() / n1;
        (n0 / total) * (n1 / total) * (m0 - m1).powi(2)
    }

    #[test]
    fn two_level_image_any_split_is_optimal() {
        let r = Raster::new(2, 2, vec![0, 0, 255, 255]).unwrap();
        let h = histogram(&r);
        let t = otsu_threshold(&h).unwrap();
        assert!(t >= 1);
        let (_, best) = oracle(&h);
        assert!((variance_at(&h, t as usize) - best).abs() <= best * 1e-12);
        assert_eq!(t, 1);
    }

    #[test]
    fn tight_clusters_are_separated() {
        let r = Raster::from_fn(10, 10, |y, x| if (y + x) % 3 == 0 { 49 + (x % 3) as u8 } else { 199 + (y % 3) as u8 });
        let t = otsu_threshold(&histogram(&r)).unwrap();
        assert!(t > 51 && t <= 199, "{t}");
    }

    #[test]
    fn random_bimodal_images_match_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let (a, b): (u8, u8) = (rng.random_range(10..100), rng.random_range(140..250));
            let r = Raster::from_fn(64, 64, |_, _| {
                let c = if rng.random_bool(0.3) { a } else { b };
                c.saturating_add(rng.random_range(0..20)).saturating_sub(10)
            });
            let h = histogram(&r);
            assert_eq!(otsu_threshold(&h).unwrap(), oracle(&h).0);
        }
    }

    #[test]
    fn constant_image_is_degenerate() {
        let err = otsu_threshold(&histogram(&Raster::filled(4, 4, 77))).unwrap_err();
        assert!(err.to_string().contains("degenerate histogram"));
    }

    #[test]
    fn inversion_values() {
        let r = Raster::from_fn(8, 8, |y, _| if y < 2 { 40 } else { 255 });
        let out = remove_background_and_invert(&r).unwrap();
        assert_eq!(out.get(7, 0), 0);
        assert_eq!(out.get(0, 0), 215);
        let bg = histogram(&r)[255];
        assert_eq!(histogram(&out)[0], bg);
    }

    #[test]
    fn clean_image_strokes_are_stable() {
        // Re-inverting a processed image restores a white background; a
        // second pass yields the same strokes.
        let r = Raster::from_fn(16, 16, |y, x| match (y + 2 * x) % 7 {
            0 => 30,
            1 => 90,
            _ => 240,
        });
        let once = remove_background_and_invert(&r).unwrap();
        let restored = Raster::new(16, 16, once.pixels().iter().map(|p| 255 - p).collect()).unwrap();
        let twice = remove_background_and_invert(&restored).unwrap();
        assert_eq!(twice, once);
    }
}
