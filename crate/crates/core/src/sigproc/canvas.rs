use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Five canvas sizes derived from development-set image dimensions.
///
/// Ids: 0 = (H̃, W̃), 1 = (H̃, τ_w), 2 = (τ_h, W̃), 3 = (τ_h, τ_w), 4 = (max_h, max_w).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasSet {
    pub mu_h: f64,
    pub sigma_h: f64,
    pub max_h: usize,
    pub mu_w: f64,
    pub sigma_w: f64,
    pub max_w: usize,
    pub tau_h: usize,
    pub tau_w: usize,
    pub median_h: usize,
    pub median_w: usize,
    pub canvases: [(usize, usize); 5],
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl CanvasSet {
    pub const MAX_CANVAS: usize = 4;

    pub fn max_canvas(&self) -> (usize, usize) {
        self.canvases[Self::MAX_CANVAS]
    }

    pub fn is_outlier(&self, (h, w): (usize, usize)) -> bool {
        h > self.tau_h || w > self.tau_w
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("canvas set serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

fn mean_std(values: &[usize]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Median; for an even count the mean of the two middle values, rounded up.
fn median(values: &mut [usize]) -> usize {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]).div_ceil(2)
    }
}

/// Computes size statistics, outlier thresholds `τ = ⌈μ + 3σ⌉` (population
/// σ) and medians over the non-outlier images.
pub fn compute_canvas_set(dims: &[(usize, usize)]) -> Result<CanvasSet> {
    if dims.len() < 2 {
        return Err(Error::Data(format!("canvas statistics need at least 2 images, got {}", dims.len())));
    }
    let hs: Vec<usize> = dims.iter().map(|d| d.0).collect();
    let ws: Vec<usize> = dims.iter().map(|d| d.1).collect();
    let (mu_h, sigma_h) = mean_std(&hs);
    let (mu_w, sigma_w) = mean_std(&ws);
    // Guard the ceiling against values like 100.00000000000001.
    let tau = |mu: f64, sigma: f64| ((mu + 3.0 * sigma) * (1.0 - 1e-12)).ceil() as usize;
    let tau_h = tau(mu_h, sigma_h);
    let tau_w = tau(mu_w, sigma_w);
    let max_h = *hs.iter().max().expect("non-empty");
    let max_w = *ws.iter().max().expect("non-empty");

    let inliers: Vec<(usize, usize)> = dims.iter().copied().filter(|&(h, w)| h <= tau_h && w <= tau_w).collect();
    if inliers.is_empty() {
        return Err(Error::Data("every development image is an outlier".into()));
    }
    let median_h = median(&mut inliers.iter().map(|d| d.0).collect::<Vec<_>>());
    let median_w = median(&mut inliers.iter().map(|d| d.1).collect::<Vec<_>>());

    let canvases = [(median_h, median_w), (median_h, tau_w), (tau_h, median_w), (tau_h, tau_w), (max_h, max_w)];
    let mut warnings = Vec::new();
    for i in 0..5 {
        for j in i + 1..5 {
            if canvases[i] == canvases[j] {
                warnings.push(format!(
                    "canvas collapse: canvases {i} and {j} are both {}x{}",
                    canvases[i].0, canvases[i].1
                ));
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(CanvasSet { mu_h, sigma_h, max_h, mu_w, sigma_w, max_w, tau_h, tau_w, median_h, median_w, canvases, warnings })
}

/// Canvas id for an image: outliers go to the max canvas, everything else to
/// the quadrant given by the medians (ties go to the smaller side).
pub fn assign_canvas(dims: (usize, usize), set: &CanvasSet) -> Result<usize> {
    let (h, w) = dims;
    let (mh, mw) = set.max_canvas();
    if h > mh || w > mw {
        return Err(Error::Data(format!("image {h}x{w} exceeds the largest canvas {mh}x{mw}")));
    }
    if set.is_outlier(dims) {
        return Ok(CanvasSet::MAX_CANVAS);
    }
    Ok(match (h > set.median_h, w > set.median_w) {
        (false, false) => 0,
        (false, true) => 1,
        (true, false) => 2,
        (true, true) => 3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manual(median: (usize, usize), tau: (usize, usize), max: (usize, usize)) -> CanvasSet {
        CanvasSet {
            mu_h: 0.0,
            sigma_h: 0.0,
            max_h: max.0,
            mu_w: 0.0,
            sigma_w: 0.0,
            max_w: max.1,
            tau_h: tau.0,
            tau_w: tau.1,
            median_h: median.0,
            median_w: median.1,
            canvases: [median, (median.0, tau.1), (tau.0, median.1), tau, max],
            warnings: vec![],
        }
    }

    #[test]
    fn constant_sizes_collapse_with_warning() {
        let set = compute_canvas_set(&[(100, 200); 6]).unwrap();
        assert_eq!(set.sigma_h, 0.0);
        assert_eq!(set.tau_h, 100);
        assert_eq!(set.tau_w, 200);
        assert!(set.canvases.iter().all(|&c| c == (100, 200)));
        assert!(!set.warnings.is_empty());
    }

    #[test]
    fn too_few_images() {
        assert!(compute_canvas_set(&[]).is_err());
        assert!(compute_canvas_set(&[(3, 4)]).is_err());
    }

    #[test]
    fn partition_rule_examples() {
        let set = manual((100, 200), (180, 300), (400, 500));
        assert_eq!(assign_canvas((90, 150), &set).unwrap(), 0);
        assert_eq!(set.canvases[assign_canvas((150, 150), &set).unwrap()], (180, 200));
        assert_eq!(assign_canvas((181, 150), &set).unwrap(), 4);
        assert_eq!(assign_canvas((100, 200), &set).unwrap(), 0);
        assert_eq!(assign_canvas((100, 201), &set).unwrap(), 1);
        assert_eq!(assign_canvas((170, 301), &set).unwrap(), 4);
        assert!(assign_canvas((401, 10), &set).is_err());
    }

    #[test]
    fn json_round_trip() {
        let set = compute_canvas_set(&[(10, 20), (12, 25), (30, 40)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("canvas.json");
        set.save(&p).unwrap();
        assert_eq!(CanvasSet::load(&p).unwrap(), set);
    }

    proptest! {
        #[test]
        fn thresholds_bound_medians_and_groups_fit(dims in prop::collection::vec((1usize..500, 1usize..900), 2..60)) {
            let set = compute_canvas_set(&dims).unwrap();
            prop_assert!(set.tau_h >= set.median_h && set.tau_w >= set.median_w);
            for &d in &dims {
                let id = assign_canvas(d, &set).unwrap();
                let (ch, cw) = set.canvases[id];
                prop_assert!(d.0 <= ch && d.1 <= cw, "{:?} does not fit canvas {} {:?}", d, id, (ch, cw));
            }
        }
    }
}
