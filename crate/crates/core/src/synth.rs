//! Synthetic signature generator for desk-scale experiments.
//!
//! Each writer owns a template: a few smooth strokes (Catmull-Rom splines
//! through random control points) plus style parameters. Genuine samples
//! jitter the template and are rendered at a random size. Stand-in skilled
//! forgeries copy the target's template with a smooth distortion and tremor,
//! drawn with a style halfway between the target and another writer. They are
//! a crude stand-in for human forgeries, useful only to exercise the pipeline.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ManifestRecord, Provenance, Split};
use crate::rng::{self, tag, Rng};
use crate::sigproc::{write_png, Raster};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dev_writers: usize,
    pub exploit_writers: usize,
    pub genuine: usize,
    pub forgeries: usize,
    /// Inclusive height range.
    pub height: (usize, usize),
    /// Inclusive width range.
    pub width: (usize, usize),
    pub dpi: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dev_writers: 10,
            exploit_writers: 10,
            genuine: 8,
            forgeries: 8,
            height: (100, 300),
            width: (100, 300),
            dpi: 300,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.dev_writers + self.exploit_writers < 2 {
            return Err(Error::Config("at least 2 writers are needed".into()));
        }
        let (h, w) = (self.height, self.width);
        if h.0 < 24 || w.0 < 24 || h.0 > h.1 || w.0 > w.1 {
            return Err(Error::Config(format!(
                "degenerate size range {}..{} x {}..{} (minimum side 24)",
                h.0, h.1, w.0, w.1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterStyle {
    /// Control points per stroke in unit coordinates.
    pub strokes: Vec<Vec<(f64, f64)>>,
    /// Pen radius at a 150-pixel height.
    pub pen: f64,
    pub ink: u8,
    pub slant: f64,
    /// Typical width / height ratio.
    pub aspect: f64,
    /// Per-sample control-point jitter.
    pub jitter: f64,
}

impl WriterStyle {
    pub fn random(rng: &mut Rng) -> Self {
        let n_strokes = rng.random_range(1..=3usize);
        let mut strokes = Vec::with_capacity(n_strokes);
        let span = 1.0 / n_strokes as f64;
        for s in 0..n_strokes {
            let k = rng.random_range(8..=14usize);
            let x0 = s as f64 * span;
            let amp: f64 = rng.random_range(0.2..0.42);
            let mut pts = Vec::with_capacity(k);
            let mut up = rng.random_bool(0.5);
            for i in 0..k {
                let t = i as f64 / (k - 1) as f64;
                // Occasional back-steps make loops.
                let back = if rng.random_bool(0.25) { -0.12 } else { 0.0 };
                let x = x0 + span * (0.05 + 0.9 * t + back + rng.random_range(-0.04..0.04));
                let swing = amp * rng.random_range(0.3..1.0);
                let y = 0.5 + if up { -swing } else { swing };
                up = !up;
                pts.push((x.clamp(0.0, 1.0), y.clamp(0.05, 0.95)));
            }
            strokes.push(pts);
        }
        WriterStyle {
            strokes,
            pen: rng.random_range(1.0..2.4),
            ink: rng.random_range(15..90),
            slant: rng.random_range(-0.3..0.3),
            aspect: rng.random_range(1.2..2.6),
            jitter: rng.random_range(0.008..0.02),
        }
    }

    /// Style parameters halfway between `self` and `other`, keeping `self`'s strokes.
    fn blend(&self, other: &WriterStyle) -> WriterStyle {
        WriterStyle {
            strokes: self.strokes.clone(),
            pen: 0.5 * (self.pen + other.pen),
            ink: ((self.ink as u16 + other.ink as u16) / 2) as u8,
            slant: 0.5 * (self.slant + other.slant),
            aspect: 0.5 * (self.aspect + other.aspect),
            jitter: self.jitter,
        }
    }
}

fn jittered(style: &WriterStyle, amount: f64, rng: &mut Rng) -> Vec<Vec<(f64, f64)>> {
    style
        .strokes
        .iter()
        .map(|s| {
            s.iter()
                .map(|&(x, y)| (x + rng.random_range(-amount..amount), y + rng.random_range(-amount..amount)))
                .collect()
        })
        .collect()
}

/// Target strokes under a smooth sinusoidal warp plus tremor.
fn forged_strokes(target: &WriterStyle, rng: &mut Rng) -> Vec<Vec<(f64, f64)>> {
    let (ax, ay) = (rng.random_range(0.03..0.07), rng.random_range(0.04..0.09));
    let (fx, fy) = (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0));
    let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let tremor = 2.5 * target.jitter;
    target
        .strokes
        .iter()
        .map(|s| {
            s.iter()
                .map(|&(x, y)| {
                    (
                        x + ax * (fy * y * 6.3 + py).sin() + rng.random_range(-tremor..tremor),
                        y + ay * (fx * x * 6.3 + px).sin() + rng.random_range(-tremor..tremor),
                    )
                })
                .collect()
        })
        .collect()
}

fn catmull_rom(pts: &[(f64, f64)], steps: usize) -> Vec<(f64, f64)> {
    let n = pts.len();
    let at = |i: isize| pts[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::with_capacity(n * steps);
    for i in 0..n.saturating_sub(1) as isize {
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        for s in 0..steps {
            let t = s as f64 / steps as f64;
            let (t2, t3) = (t * t, t * t * t);
            let f = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b
                    + (c - a) * t
                    + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
                    + (3.0 * b - a - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(pts[n - 1]);
    out
}

/// Draws strokes as dark ink on a light, slightly noisy background.
fn render(strokes: &[Vec<(f64, f64)>], style: &WriterStyle, h: usize, w: usize, rng: &mut Rng) -> Raster {
    let mut img = Raster::from_fn(h, w, |_, _| rng.random_range(238..=255));
    let radius = (style.pen * h as f64 / 150.0).max(0.8);
    let (mh, mw) = (0.1 * h as f64, 0.06 * w as f64);
    let ink = style.ink as f64;
    let steps = 4 * (h.max(w) / 8).max(4);
    for s in strokes {
        let curve = catmull_rom(s, steps / s.len().max(1) + 2);
        let mut prev: Option<(f64, f64)> = None;
        for &(ux, uy) in &curve {
            let ux = ux + style.slant * (0.5 - uy) * 0.3;
            let p = (mh + uy.clamp(0.0, 1.0) * (h as f64 - 2.0 * mh), mw + ux.clamp(0.0, 1.0) * (w as f64 - 2.0 * mw));
            // Fill gaps between samples at half-pixel spacing.
            let (py, px) = prev.unwrap_or(p);
            let dist = ((p.0 - py).powi(2) + (p.1 - px).powi(2)).sqrt();
            let n = (dist * 2.0).ceil().max(1.0) as usize;
            for k in 1..=n {
                let t = k as f64 / n as f64;
                stamp(&mut img, py + t * (p.0 - py), px + t * (p.1 - px), radius, ink);
            }
            prev = Some(p);
        }
    }
    img
}

fn stamp(img: &mut Raster, cy: f64, cx: f64, r: f64, ink: f64) {
    let (h, w) = img.dims();
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil() as usize).min(h - 1);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let cov = (r + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                let cur = img.get(y, x) as f64;
                let v = cur * (1.0 - cov) + ink * cov;
                if v < cur {
                    img.set(y, x, v.round() as u8);
                }
            }
        }
    }
}

fn sample_size(cfg: &SynthConfig, aspect: f64, rng: &mut Rng) -> (usize, usize) {
    let h = rng.random_range(cfg.height.0..=cfg.height.1);
    let w = (h as f64 * aspect * rng.random_range(0.85..1.15)).round() as usize;
    (h, w.clamp(cfg.width.0, cfg.width.1))
}

/// Generated images with their manifest; paths are relative.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Raster>,
    pub styles: Vec<WriterStyle>,
}

impl SyntheticDataset {
    /// Writes the PNGs and `manifest.jsonl` under `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        for (rec, img) in self.manifest.records.iter().zip(&self.images) {
            let p = dir.join(&rec.path);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_png(img, &p)?;
        }
        let path = dir.join("manifest.jsonl");
        self.manifest.save(&path)?;
        Ok(path)
    }
}

/// Writers `0..dev_writers` form the development split, the rest the
/// exploitation split. Every draw comes from a stream keyed by writer and
/// sample, so the output depends only on the configuration.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let n = cfg.dev_writers + cfg.exploit_writers;
    let styles: Vec<WriterStyle> =
        (0..n).map(|w| WriterStyle::random(&mut rng::stream(cfg.seed, &[tag::SYNTH, w as u64]))).collect();
    let mut records = Vec::new();
    let mut images = Vec::new();
    for (w, style) in styles.iter().enumerate() {
        let split = if w < cfg.dev_writers { Split::Dev } else { Split::Exploit };
        for i in 0..cfg.genuine {
            let mut g = rng::stream(cfg.seed, &[tag::SYNTH, w as u64, 1, i as u64]);
            let (h, wd) = sample_size(cfg, style.aspect, &mut g);
            let strokes = jittered(style, style.jitter, &mut g);
            images.push(render(&strokes, style, h, wd, &mut g));
            records.push(ManifestRecord {
                path: format!("w{w:03}/g{i:02}.png"),
                writer: w as u32,
                forgery: false,
                split,
                dpi: cfg.dpi,
            });
        }
        for i in 0..cfg.forgeries {
            let mut g = rng::stream(cfg.seed, &[tag::SYNTH, w as u64, 2, i as u64]);
            let forger = (w + 1 + g.random_range(0..n - 1)) % n;
            let look = style.blend(&styles[forger]);
            let (h, wd) = sample_size(cfg, look.aspect, &mut g);
            let strokes = forged_strokes(style, &mut g);
            images.push(render(&strokes, &look, h, wd, &mut g));
            records.push(ManifestRecord {
                path: format!("w{w:03}/f{i:02}.png"),
                writer: w as u32,
                forgery: true,
                split,
                dpi: cfg.dpi,
            });
        }
    }
    Ok(SyntheticDataset {
        manifest: DatasetManifest { records, canvas_set: None, provenance: Provenance::Generator { seed: cfg.seed } },
        images,
        styles,
    })
}
