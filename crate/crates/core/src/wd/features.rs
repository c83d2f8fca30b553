//! Fixed-length representations read from the last hidden layer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::sigproc::{center_in_canvas, fit_to_canvas, resize_bilinear, to_tensor, Raster};
use crate::trainer::center_crop;

/// How an image is sized before the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FeatureProtocol {
    /// Center on `canvas` (shrinking larger images when `resize` is set),
    /// then resize the canvas to `input`. Models with a smaller nominal
    /// input see its central window.
    NonSpp { canvas: (usize, usize), input: (usize, usize), resize: bool },
    /// Center on `canvas`; larger images keep their original size.
    SppFixed { canvas: (usize, usize) },
    /// Original size always.
    SppMulti,
}

/// Network input for `image` under `protocol`.
pub fn prepare_input(image: &Raster, protocol: &FeatureProtocol) -> Result<Raster> {
    match *protocol {
        FeatureProtocol::NonSpp { canvas, input, resize } => {
            let (h, w) = image.dims();
            let placed = if h <= canvas.0 && w <= canvas.1 {
                center_in_canvas(image, canvas.0, canvas.1)?
            } else if resize {
                fit_to_canvas(image, canvas.0, canvas.1)?
            } else {
                return Err(Error::Data(format!(
                    "image {h}x{w} exceeds canvas {}x{} and resizing is disabled",
                    canvas.0, canvas.1
                )));
            };
            resize_bilinear(&placed, input.0, input.1)
        }
        FeatureProtocol::SppFixed { canvas } => {
            let (h, w) = image.dims();
            if h <= canvas.0 && w <= canvas.1 {
                center_in_canvas(image, canvas.0, canvas.1)
            } else {
                Ok(image.clone())
            }
        }
        FeatureProtocol::SppMulti => Ok(image.clone()),
    }
}

/// φ(X) for one image: the eval-mode output of the last hidden layer.
pub fn extract_features(model: &Model<f32>, image: &Raster, protocol: &FeatureProtocol) -> Result<Vec<f32>> {
    if !model.spec().has_spp() && !matches!(protocol, FeatureProtocol::NonSpp { .. }) {
        return Err(Error::Config(format!(
            "{} has no SPP layer and needs the fixed-input protocol",
            model.spec().name
        )));
    }
    let mut input = prepare_input(image, protocol)?;
    if let Some((h, w)) = model.spec().nominal_input {
        if input.dims() != (h, w) {
            input = center_crop(&input, h, w)?;
        }
    }
    let feats = model.features(&to_tensor(&[&input])?)?;
    Ok(feats.into_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Genuine,
    Simple,
    Skilled,
}

/// Index entry of one feature row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub writer: u32,
    pub kind: SampleKind,
}

impl FeatureRecord {
    pub fn is_forgery(&self) -> bool {
        self.kind != SampleKind::Genuine
    }
}

/// Feature matrix with one record per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
    pub values: Vec<f32>,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct FeatureIndex {
    config_hash: String,
    feature_len: usize,
    rows: Vec<FeatureRecord>,
}

impl FeatureSet {
    pub fn new(dim: usize, config_hash: impl Into<String>) -> Self {
        FeatureSet { dim, records: Vec::new(), values: Vec::new(), config_hash: config_hash.into() }
    }

    pub fn push(&mut self, record: FeatureRecord, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Data(format!("feature of length {} in a set of length {}", values.len(), self.dim)));
        }
        self.records.push(record);
        self.values.extend_from_slice(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn writers(&self) -> Vec<u32> {
        let mut w: Vec<u32> = self.records.iter().map(|r| r.writer).collect();
        w.sort_unstable();
        w.dedup();
        w
    }

    /// Rows of `writer` with the given kind, in file order.
    pub fn rows_of(&self, writer: u32, kind: SampleKind) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].writer == writer && self.records[i].kind == kind).collect()
    }

    /// Writes `<stem>.f32` (little-endian row-major matrix) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("f32");
        let idx = stem.with_extension("json");
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let index =
            FeatureIndex { config_hash: self.config_hash.clone(), feature_len: self.dim, rows: self.records.clone() };
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&idx, text).map_err(|e| Error::io(&idx, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("f32");
        let idx = stem.with_extension("json");
        let text = fs::read_to_string(&idx).map_err(|e| Error::io(&idx, e))?;
        let index: FeatureIndex =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", idx.display())))?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != 4 * index.feature_len * index.rows.len() {
            return Err(Error::Data(format!(
                "{}: {} bytes for {} rows of length {}",
                bin.display(),
                bytes.len(),
                index.rows.len(),
                index.feature_len
            )));
        }
        Ok(FeatureSet {
            dim: index.feature_len,
            records: index.rows,
            values: bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect(),
            config_hash: index.config_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_architecture, glorot_init};

    fn scribble(h: usize, w: usize) -> Raster {
        Raster::from_fn(h, w, |y, x| if (y * 7 + x * 3) % 17 < 3 { 200 } else { 0 })
    }

    #[test]
    fn spp_lengths_match_across_sizes() {
        let spec = build_architecture("SigNet-SPP-desk", None, 4, false).unwrap();
        let m: Model<f32> = glorot_init(spec, 3).unwrap();
        let a = extract_features(&m, &scribble(150, 220), &FeatureProtocol::SppMulti).unwrap();
        let b = extract_features(&m, &scribble(300, 500), &FeatureProtocol::SppMulti).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.len(), m.feature_dim());
        let again = extract_features(&m, &scribble(150, 220), &FeatureProtocol::SppMulti).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn non_spp_without_resize_rejects_oversize() {
        let p = FeatureProtocol::NonSpp { canvas: (50, 60), input: (40, 48), resize: false };
        assert!(prepare_input(&scribble(51, 10), &p).is_err());
        assert_eq!(prepare_input(&scribble(30, 30), &p).unwrap().dims(), (40, 48));
    }

    #[test]
    fn spp_fixed_keeps_large_images() {
        let p = FeatureProtocol::SppFixed { canvas: (50, 60) };
        assert_eq!(prepare_input(&scribble(40, 40), &p).unwrap().dims(), (50, 60));
        assert_eq!(prepare_input(&scribble(70, 40), &p).unwrap().dims(), (70, 40));
    }

    #[test]
    fn file_round_trip() {
        let mut set = FeatureSet::new(3, "abc");
        set.push(FeatureRecord { id: "a".into(), writer: 1, kind: SampleKind::Genuine }, &[1.0, 2.5, -3.0]).unwrap();
        set.push(FeatureRecord { id: "b".into(), writer: 2, kind: SampleKind::Skilled }, &[0.0, 1e-7, 4.0]).unwrap();
        assert!(set.push(FeatureRecord { id: "c".into(), writer: 2, kind: SampleKind::Genuine }, &[0.0]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("feats");
        set.save(&stem).unwrap();
        assert_eq!(FeatureSet::load(&stem).unwrap(), set);
        assert_eq!(set.rows_of(2, SampleKind::Skilled), vec![1]);
    }
}
